//! Synthetic labeled speaker-embedding corpora.
//!
//! Each utterance vector is the sum of a gender direction, an accent
//! direction, a per-speaker offset and isotropic Gaussian noise. Speakers
//! carry exactly one gender and one accent, so every label is a
//! speaker-level attribute.
//!
//! Corpora are persisted as UTF-8 CSV with the header
//! `utterance_id,speaker_id,gender,accent,v0,...,v{D-1}`; vector entries are
//! written with 17 significant digits so that `f64` values round-trip
//! exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 4] = ["utterance_id", "speaker_id", "gender", "accent"];

/// One utterance embedding together with its speaker-level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub utterance_id: String,
    pub speaker_id: String,
    pub gender: String,
    pub accent: String,
    pub vector: Vec<f64>,
}

/// Which labeled attribute of an embedding a classifier targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Speaker,
    Gender,
    Accent,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Speaker, Attribute::Gender, Attribute::Accent];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Speaker => "speaker",
            Attribute::Gender => "gender",
            Attribute::Accent => "accent",
        }
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(Attribute::Speaker),
            "gender" => Ok(Attribute::Gender),
            "accent" => Ok(Attribute::Accent),
            other => Err(Error::invalid(
                "attribute",
                format!("unknown attribute `{other}`"),
            )),
        }
    }
}

/// Lexicographically ordered label vocabulary with contiguous indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocab {
    labels: Vec<String>,
}

impl Vocab {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut labels: Vec<String> = labels.into_iter().map(str::to_owned).collect();
        labels.sort();
        labels.dedup();
        Vocab { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels
            .binary_search_by(|probe| probe.as_str().cmp(label))
            .ok()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// The three label vocabularies shared by the splits of one corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Vocabs {
    pub speaker: Vocab,
    pub gender: Vocab,
    pub accent: Vocab,
}

impl Vocabs {
    pub fn get(&self, attribute: Attribute) -> &Vocab {
        match attribute {
            Attribute::Speaker => &self.speaker,
            Attribute::Gender => &self.gender,
            Attribute::Accent => &self.accent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
    Unsplit,
}

/// A labeled collection of embeddings of one common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    embeddings: Vec<Embedding>,
    dim: usize,
    vocabs: Vocabs,
    split: SplitTag,
}

impl Corpus {
    /// Builds a corpus whose vocabularies are exactly the labels present.
    pub fn new(embeddings: Vec<Embedding>, split: SplitTag) -> Result<Self> {
        let vocabs = Vocabs {
            speaker: Vocab::from_labels(embeddings.iter().map(|e| e.speaker_id.as_str())),
            gender: Vocab::from_labels(embeddings.iter().map(|e| e.gender.as_str())),
            accent: Vocab::from_labels(embeddings.iter().map(|e| e.accent.as_str())),
        };
        Self::with_vocabs(embeddings, vocabs, split)
    }

    /// Builds a corpus against externally fixed vocabularies (closed-set
    /// labels shared between splits). Fails on a label missing from a vocab.
    pub fn with_vocabs(
        embeddings: Vec<Embedding>,
        vocabs: Vocabs,
        split: SplitTag,
    ) -> Result<Self> {
        let first = embeddings.first().ok_or(Error::EmptyCorpus)?;
        let dim = first.vector.len();
        if dim == 0 {
            return Err(Error::invalid(
                "dim",
                "embedding dimension must be positive",
            ));
        }
        Self::validated(embeddings, dim, vocabs, split)
    }

    /// Like [`Corpus::with_vocabs`] but allows zero embeddings, which only
    /// arise as empty holdout splits.
    fn validated(
        embeddings: Vec<Embedding>,
        dim: usize,
        vocabs: Vocabs,
        split: SplitTag,
    ) -> Result<Self> {
        let mut ids = HashSet::with_capacity(embeddings.len());
        let mut speaker_attrs: HashMap<&str, (&str, &str)> = HashMap::new();
        for e in &embeddings {
            if e.vector.len() != dim {
                return Err(Error::Shape {
                    context: "embedding vector",
                    expected: dim,
                    actual: e.vector.len(),
                });
            }
            if let Some(bad) = e.vector.iter().find(|v| !v.is_finite()) {
                return Err(Error::invalid(
                    "vector",
                    format!("utterance `{}` has non-finite entry {bad}", e.utterance_id),
                ));
            }
            if !ids.insert(e.utterance_id.as_str()) {
                return Err(Error::invalid(
                    "utterance_id",
                    format!("duplicate id `{}`", e.utterance_id),
                ));
            }
            for (kind, vocab, label) in [
                ("speaker", &vocabs.speaker, &e.speaker_id),
                ("gender", &vocabs.gender, &e.gender),
                ("accent", &vocabs.accent, &e.accent),
            ] {
                if vocab.index_of(label).is_none() {
                    return Err(Error::UnknownLabel {
                        kind,
                        label: label.clone(),
                    });
                }
            }
            let attrs = (e.gender.as_str(), e.accent.as_str());
            match speaker_attrs.insert(e.speaker_id.as_str(), attrs) {
                Some(prev) if prev != attrs => {
                    return Err(Error::invalid(
                        "speaker_id",
                        format!("speaker `{}` has inconsistent gender/accent", e.speaker_id),
                    ))
                }
                _ => {}
            }
        }
        Ok(Corpus {
            embeddings,
            dim,
            vocabs,
            split,
        })
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocabs(&self) -> &Vocabs {
        &self.vocabs
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Re-keys this corpus onto `vocabs`, e.g. a held-out file read back from
    /// disk onto the vocabularies of its training split.
    pub fn reindexed(self, vocabs: &Vocabs) -> Result<Self> {
        Self::validated(self.embeddings, self.dim, vocabs.clone(), self.split)
    }

    /// Replaces every vector, keeping ids and labels.
    pub fn map_vectors<F>(&self, mut f: F) -> Result<Corpus>
    where
        F: FnMut(&Embedding) -> Result<Vec<f64>>,
    {
        let mut out = Vec::with_capacity(self.embeddings.len());
        for e in &self.embeddings {
            out.push(Embedding {
                vector: f(e)?,
                ..e.clone()
            });
        }
        let dim = out.first().map_or(self.dim, |e| e.vector.len());
        Self::validated(out, dim, self.vocabs.clone(), self.split)
    }

    /// Vectors as a `N x D` matrix, row order preserved.
    pub fn matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.dim));
        for (mut row, e) in m.rows_mut().into_iter().zip(&self.embeddings) {
            row.iter_mut().zip(&e.vector).for_each(|(r, v)| *r = *v);
        }
        m
    }

    /// Class indices of `attribute` for every embedding, row order preserved.
    pub fn label_indices(&self, attribute: Attribute) -> Vec<usize> {
        let vocab = self.vocabs.get(attribute);
        self.embeddings
            .iter()
            .map(|e| {
                let label = match attribute {
                    Attribute::Speaker => &e.speaker_id,
                    Attribute::Gender => &e.gender,
                    Attribute::Accent => &e.accent,
                };
                vocab
                    .index_of(label)
                    .expect("labels validated at construction")
            })
            .collect()
    }

    /// Mean over coordinates of the per-coordinate (population) variance.
    pub fn mean_coordinate_variance(&self) -> f64 {
        let m = self.matrix();
        let var = m.var_axis(ndarray::Axis(0), 0.0);
        var.mean().unwrap_or(0.0)
    }
}

/// Offset scales of the three label-dependent components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeStrength {
    pub speaker: f64,
    pub gender: f64,
    pub accent: f64,
}

/// Parameters of [`generate_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_genders: usize,
    pub n_accents: usize,
    pub utterances_per_speaker: usize,
    pub dim: usize,
    pub attribute_strength: AttributeStrength,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    /// Desk-scale corpus: 40 speakers, 2 genders, 4 accents, 30 utterances
    /// each, D = 64. Noise carries most of the per-coordinate variance while
    /// the speaker offset stays well separated in 64 dimensions.
    fn default() -> Self {
        CorpusSpec {
            n_speakers: 40,
            n_genders: 2,
            n_accents: 4,
            utterances_per_speaker: 30,
            dim: 64,
            attribute_strength: AttributeStrength {
                speaker: 1.3,
                gender: 0.5,
                accent: 0.4,
            },
            noise_sigma: 2.0,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("n_speakers", self.n_speakers),
            ("n_genders", self.n_genders),
            ("n_accents", self.n_accents),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("dim", self.dim),
        ] {
            if value == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if self.n_speakers < self.n_genders {
            return Err(Error::invalid(
                "n_speakers",
                format!(
                    "{} speakers cannot cover {} genders",
                    self.n_speakers, self.n_genders
                ),
            ));
        }
        for (field, value) in [
            (
                "attribute_strength.speaker",
                self.attribute_strength.speaker,
            ),
            ("attribute_strength.gender", self.attribute_strength.gender),
            ("attribute_strength.accent", self.attribute_strength.accent),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::invalid(
                    field,
                    format!("must be finite and >= 0, got {value}"),
                ));
            }
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma <= 0.0 {
            return Err(Error::invalid(
                "noise_sigma",
                format!("must be finite and > 0, got {}", self.noise_sigma),
            ));
        }
        Ok(())
    }
}

fn pad_width(count: usize) -> usize {
    count.saturating_sub(1).max(1).to_string().len()
}

fn gender_labels(n: usize) -> Vec<String> {
    if n == 2 {
        vec!["f".into(), "m".into()]
    } else {
        let w = pad_width(n);
        (0..n).map(|i| format!("g{i:0w$}")).collect()
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draws a synthetic corpus. Pure function of `spec`, seed included.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;
    let strength = spec.attribute_strength;

    let genders = gender_labels(spec.n_genders);
    let gender_dirs: Vec<Vec<f64>> = (0..spec.n_genders)
        .map(|_| gaussian_vector(&mut rng, dim, strength.gender))
        .collect();
    let accent_w = pad_width(spec.n_accents).max(2);
    let accents: Vec<String> = (0..spec.n_accents)
        .map(|i| format!("acc{i:0accent_w$}"))
        .collect();
    let accent_dirs: Vec<Vec<f64>> = (0..spec.n_accents)
        .map(|_| gaussian_vector(&mut rng, dim, strength.accent))
        .collect();

    let spk_w = pad_width(spec.n_speakers).max(3);
    let utt_w = pad_width(spec.utterances_per_speaker).max(3);
    let mut embeddings = Vec::with_capacity(spec.n_speakers * spec.utterances_per_speaker);
    for s in 0..spec.n_speakers {
        let gender = s % spec.n_genders;
        let accent = rng.random_range(0..spec.n_accents);
        let offset = gaussian_vector(&mut rng, dim, strength.speaker);
        let center: Vec<f64> = (0..dim)
            .map(|j| gender_dirs[gender][j] + accent_dirs[accent][j] + offset[j])
            .collect();
        let speaker_id = format!("spk{s:0spk_w$}");
        for u in 0..spec.utterances_per_speaker {
            let vector = center
                .iter()
                .map(|c| c + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            embeddings.push(Embedding {
                utterance_id: format!("{speaker_id}-u{u:0utt_w$}"),
                speaker_id: speaker_id.clone(),
                gender: genders[gender].clone(),
                accent: accents[accent].clone(),
                vector,
            });
        }
    }
    Corpus::new(embeddings, SplitTag::Unsplit)
}

/// Per speaker, in utterance-id order: the last `n_heldout` utterances go to
/// valid, the `n_heldout` before them to test, the rest to train.
/// Vocabularies are shared by all three outputs.
pub fn split_corpus(corpus: &Corpus, n_heldout: usize) -> Result<(Corpus, Corpus, Corpus)> {
    let mut by_speaker: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in corpus.embeddings() {
        by_speaker
            .entry(e.speaker_id.as_str())
            .or_default()
            .push(e.utterance_id.as_str());
    }
    let mut role: HashMap<&str, SplitTag> = HashMap::with_capacity(corpus.len());
    for (speaker, mut utts) in by_speaker {
        if n_heldout > 0 && utts.len() <= 2 * n_heldout {
            return Err(Error::InsufficientUtterances {
                speaker: speaker.to_owned(),
                available: utts.len(),
                required: 2 * n_heldout,
            });
        }
        utts.sort_unstable();
        let n = utts.len();
        for (i, utt) in utts.into_iter().enumerate() {
            let tag = if i >= n - n_heldout {
                SplitTag::Valid
            } else if i >= n - 2 * n_heldout {
                SplitTag::Test
            } else {
                SplitTag::Train
            };
            role.insert(utt, tag);
        }
    }
    let part = |tag: SplitTag| {
        let members: Vec<Embedding> = corpus
            .embeddings()
            .iter()
            .filter(|e| role[e.utterance_id.as_str()] == tag)
            .cloned()
            .collect();
        Corpus::validated(members, corpus.dim(), corpus.vocabs().clone(), tag)
    };
    Ok((
        part(SplitTag::Train)?,
        part(SplitTag::Valid)?,
        part(SplitTag::Test)?,
    ))
}

/// 17 significant digits: exact round-trip for `f64`.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..corpus.dim()).map(|j| format!("v{j}")));
    writer.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for e in corpus.embeddings() {
        record.clear();
        record.extend([
            e.utterance_id.clone(),
            e.speaker_id.clone(),
            e.gender.clone(),
            e.accent.clone(),
        ]);
        record.extend(e.vector.iter().map(|v| format_f64(*v)));
        writer.write_record(&record)?;
    }
    let mut inner = writer
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

/// Reads a corpus written by [`write_corpus`]. Vocabularies are rebuilt from
/// the labels present; the split tag is [`SplitTag::Unsplit`].
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(BufReader::new(file));
    let parse_err = |line: u64, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h?,
        None => return Err(parse_err(1, "missing header".into())),
    };
    if header.len() <= FIXED_COLUMNS.len()
        || header
            .iter()
            .take(FIXED_COLUMNS.len())
            .ne(FIXED_COLUMNS.iter().copied())
    {
        return Err(parse_err(
            1,
            format!(
                "header must start with {} followed by v0..",
                FIXED_COLUMNS.join(",")
            ),
        ));
    }
    let dim = header.len() - FIXED_COLUMNS.len();
    for (j, name) in header.iter().skip(FIXED_COLUMNS.len()).enumerate() {
        if name != format!("v{j}") {
            return Err(parse_err(
                1,
                format!("expected column `v{j}`, found `{name}`"),
            ));
        }
    }

    let mut embeddings = Vec::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != FIXED_COLUMNS.len() + dim {
            return Err(parse_err(
                line,
                format!(
                    "row has {} vector entries, header declares D = {dim}",
                    record.len().saturating_sub(FIXED_COLUMNS.len())
                ),
            ));
        }
        let vector = record
            .iter()
            .skip(FIXED_COLUMNS.len())
            .map(|field| {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("bad number `{field}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        embeddings.push(Embedding {
            utterance_id: record[0].to_owned(),
            speaker_id: record[1].to_owned(),
            gender: record[2].to_owned(),
            accent: record[3].to_owned(),
            vector,
        });
    }
    if embeddings.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::new(embeddings, SplitTag::Unsplit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_speakers: 4,
            n_genders: 2,
            n_accents: 3,
            utterances_per_speaker: 3,
            dim: 5,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&CorpusSpec::default()).unwrap();
        let b = generate_corpus(&CorpusSpec::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusSpec {
            seed: 8,
            ..CorpusSpec::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_match_spec() {
        let c = generate_corpus(&small_spec()).unwrap();
        assert_eq!(c.len(), 12);
        assert_eq!(c.vocabs().speaker.len(), 4);
        assert_eq!(c.dim(), 5);
        assert_eq!(c.vocabs().gender.labels(), ["f", "m"]);
    }

    #[test]
    fn genders_assigned_round_robin() {
        let c = generate_corpus(&CorpusSpec {
            n_genders: 3,
            ..small_spec()
        })
        .unwrap();
        let g: Vec<&str> = c
            .embeddings()
            .iter()
            .step_by(3)
            .map(|e| e.gender.as_str())
            .collect();
        assert_eq!(g, ["g0", "g1", "g2", "g0"]);
    }

    #[test]
    fn vanishing_noise_collapses_utterances() {
        let c = generate_corpus(&CorpusSpec {
            noise_sigma: 1e-300,
            attribute_strength: AttributeStrength {
                speaker: 1.0,
                gender: 1.0,
                accent: 1.0,
            },
            ..small_spec()
        })
        .unwrap();
        for chunk in c.embeddings().chunks(3) {
            assert!(chunk.iter().all(|e| e.vector == chunk[0].vector));
        }
    }

    #[test]
    fn invalid_spec_names_field() {
        let err = generate_corpus(&CorpusSpec {
            n_accents: 0,
            ..small_spec()
        })
        .unwrap_err();
        assert!(err.to_string().contains("n_accents"), "{err}");
        let err = generate_corpus(&CorpusSpec {
            noise_sigma: f64::NAN,
            ..small_spec()
        })
        .unwrap_err();
        assert!(err.to_string().contains("noise_sigma"), "{err}");
        let err = generate_corpus(&CorpusSpec {
            n_speakers: 1,
            ..small_spec()
        })
        .unwrap_err();
        assert!(err.to_string().contains("n_speakers"), "{err}");
    }

    #[test]
    fn split_assigns_tail_to_valid_then_test() {
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        let (train, valid, test) = split_corpus(&c, 10).unwrap();
        assert_eq!(train.len(), 400);
        assert_eq!(valid.len(), 400);
        assert_eq!(test.len(), 400);
        assert_eq!(train.vocabs(), c.vocabs());
        assert_eq!(valid.split(), SplitTag::Valid);
        assert!(valid
            .embeddings()
            .iter()
            .any(|e| e.utterance_id == "spk000-u029"));
        assert!(test
            .embeddings()
            .iter()
            .any(|e| e.utterance_id == "spk000-u019"));
        assert!(train
            .embeddings()
            .iter()
            .any(|e| e.utterance_id == "spk000-u009"));
        assert!(valid
            .embeddings()
            .iter()
            .all(|e| e.utterance_id.as_str() >= "spk000-u020"
                || !e.utterance_id.starts_with("spk000")));
    }

    #[test]
    fn zero_holdout_keeps_everything_in_train() {
        let c = generate_corpus(&small_spec()).unwrap();
        let (train, valid, test) = split_corpus(&c, 0).unwrap();
        assert_eq!(train.embeddings(), c.embeddings());
        assert!(valid.is_empty() && test.is_empty());
    }

    #[test]
    fn split_rejects_short_speakers() {
        let c = generate_corpus(&CorpusSpec {
            utterances_per_speaker: 5,
            ..small_spec()
        })
        .unwrap();
        let err = split_corpus(&c, 10).unwrap_err();
        assert!(
            matches!(err, Error::InsufficientUtterances { ref speaker, .. } if speaker == "spk000")
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        write_corpus(&c, &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), c);
    }

    #[test]
    fn short_row_is_parse_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "utterance_id,speaker_id,gender,accent,v0,v1\n\
             a,s1,f,x,1.0,2.0\n\
             b,s1,f,x,1.0\n",
        )
        .unwrap();
        match read_corpus(&path).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn header_only_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "utterance_id,speaker_id,gender,accent,v0\n").unwrap();
        let err = read_corpus(&path).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn inconsistent_speaker_attributes_rejected() {
        let e = |id: &str, g: &str| Embedding {
            utterance_id: id.into(),
            speaker_id: "s".into(),
            gender: g.into(),
            accent: "a".into(),
            vector: vec![1.0],
        };
        assert!(Corpus::new(vec![e("1", "f"), e("2", "m")], SplitTag::Unsplit).is_err());
        assert!(Corpus::new(vec![e("1", "f"), e("1", "f")], SplitTag::Unsplit).is_err());
    }
}

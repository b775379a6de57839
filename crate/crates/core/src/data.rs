//! Samples, manifests, emotion-label mapping, apex-neighbour expansion and
//! leave-one-subject-out folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{face_crop, load_image, FaceDetector, Image};

/// Three-way emotion category used for recognition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseEmotion {
    Positive,
    Negative,
    Surprise,
}

impl CoarseEmotion {
    pub const ALL: [CoarseEmotion; 3] = [
        CoarseEmotion::Positive,
        CoarseEmotion::Negative,
        CoarseEmotion::Surprise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CoarseEmotion::Positive => "Positive",
            CoarseEmotion::Negative => "Negative",
            CoarseEmotion::Surprise => "Surprise",
        }
    }
}

impl fmt::Display for CoarseEmotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Datasets with a known label table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Casme2,
    Samm,
    Mmew,
    Casme3,
    Synthetic,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Casme2 => "casme2",
            DatasetId::Samm => "samm",
            DatasetId::Mmew => "mmew",
            DatasetId::Casme3 => "casme3",
            DatasetId::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    /// Accepts the canonical ids plus common spellings such as `CASME II`
    /// or `CAS(ME)^3`.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "casme2" | "casmeii" => Ok(DatasetId::Casme2),
            "samm" => Ok(DatasetId::Samm),
            "mmew" => Ok(DatasetId::Mmew),
            "casme3" | "casmeiii" => Ok(DatasetId::Casme3),
            "synthetic" => Ok(DatasetId::Synthetic),
            _ => Err(Error::UnsupportedDataset(s.to_string())),
        }
    }
}

/// Outcome of mapping a dataset-native label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmotionMapping {
    Keep(CoarseEmotion),
    /// Native label outside the three-class protocol; the sample is dropped.
    Exclude,
}

/// Maps a dataset-native emotion label onto the three-class protocol.
///
/// Matching ignores case and surrounding whitespace. Labels the dataset
/// annotates but the protocol does not use (`others`, `repression`, ...)
/// map to [`EmotionMapping::Exclude`]; anything else is an error.
pub fn map_emotion(raw_name: &str, dataset: DatasetId) -> Result<EmotionMapping> {
    use CoarseEmotion::*;
    use EmotionMapping::*;
    let label = raw_name.trim().to_ascii_lowercase();
    let mapped = match (dataset, label.as_str()) {
        (_, "happiness") => Some(Keep(Positive)),
        (_, "surprise") => Some(Keep(Surprise)),
        (DatasetId::Casme2 | DatasetId::Casme3, "disgust" | "sadness" | "fear") => Some(Keep(Negative)),
        (DatasetId::Casme2, "others" | "repression" | "depression") => Some(Exclude),
        (DatasetId::Casme3, "others") => Some(Exclude),
        (
            DatasetId::Samm | DatasetId::Mmew,
            "sadness" | "contempt" | "anger" | "fear" | "disgust",
        ) => Some(Keep(Negative)),
        (DatasetId::Samm | DatasetId::Mmew, "others") => Some(Exclude),
        (DatasetId::Synthetic, "positive") => Some(Keep(Positive)),
        (DatasetId::Synthetic, "negative") => Some(Keep(Negative)),
        _ => None,
    };
    mapped.ok_or_else(|| Error::UnknownEmotion {
        label: raw_name.to_string(),
        dataset: dataset.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionLabel {
    pub raw_name: String,
    pub coarse: CoarseEmotion,
}

/// Binary action-unit activations over a manifest-declared vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuVector {
    bits: Vec<bool>,
}

impl AuVector {
    pub fn new(bits: Vec<bool>) -> Self {
        AuVector { bits }
    }

    pub fn zeros(len: usize) -> Self {
        AuVector {
            bits: vec![false; len],
        }
    }

    /// Builds the vector for the named AUs; every name must be in `vocabulary`.
    pub fn from_names<S: AsRef<str>>(names: &[S], vocabulary: &[String]) -> Result<Self> {
        let mut bits = vec![false; vocabulary.len()];
        for name in names {
            let name = name.as_ref();
            let i = vocabulary
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| Error::invalid(format!("AU `{name}` is not in the vocabulary")))?;
            bits[i] = true;
        }
        Ok(AuVector { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn names<'a>(&self, vocabulary: &'a [String]) -> Vec<&'a str> {
        self.active().map(|i| vocabulary[i].as_str()).collect()
    }
}

/// One micro-expression instance with its decoded frames.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Clip directory relative to the manifest; unique per sample.
    pub id: String,
    pub subject_id: String,
    pub emotion: EmotionLabel,
    pub aus: AuVector,
    pub apex_index: usize,
    pub frames: Vec<Image>,
}

impl Sample {
    pub fn apex_frame(&self) -> &Image {
        &self.frames[self.apex_index]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestHeader {
    dataset_id: String,
    au_vocabulary: Vec<String>,
}

/// One manifest record; `au_list` holds semicolon-separated AU names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_dir: String,
    pub subject: String,
    pub emotion_raw: String,
    pub au_list: String,
    pub apex_index: usize,
}

impl ManifestEntry {
    pub fn au_names(&self) -> Vec<&str> {
        self.au_list
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    }
}

/// Line-delimited JSON manifest: a header line declaring the dataset id and
/// the ordered AU vocabulary, then one record per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dataset_id: DatasetId,
    pub au_vocabulary: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory that `clip_dir` paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(
        dataset_id: DatasetId,
        au_vocabulary: Vec<String>,
        entries: Vec<ManifestEntry>,
        root: impl Into<PathBuf>,
    ) -> Result<Self> {
        let m = Manifest {
            dataset_id,
            au_vocabulary,
            entries,
            root: root.into(),
        };
        m.validate("<memory>")?;
        Ok(m)
    }

    fn validate(&self, path: &str) -> Result<()> {
        let bad = |line: usize, reason: String| Error::Manifest {
            path: path.to_string(),
            line,
            reason,
        };
        let vocab: BTreeSet<&str> = self.au_vocabulary.iter().map(String::as_str).collect();
        if vocab.len() != self.au_vocabulary.len() {
            return Err(bad(1, "duplicate names in au_vocabulary".into()));
        }
        if vocab.is_empty() {
            return Err(bad(1, "au_vocabulary is empty".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let line = i + 2;
            if e.subject.trim().is_empty() {
                return Err(bad(line, "empty subject id".into()));
            }
            if e.clip_dir.trim().is_empty() {
                return Err(bad(line, "empty clip_dir".into()));
            }
            if let Some(au) = e.au_names().into_iter().find(|a| !vocab.contains(a)) {
                return Err(bad(line, format!("AU `{au}` is not in au_vocabulary")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>, origin: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or_else(|| Error::Manifest {
            path: origin.to_string(),
            line: 1,
            reason: "missing header line".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(head).map_err(|e| Error::Manifest {
            path: origin.to_string(),
            line: 1,
            reason: format!("bad header: {e}"),
        })?;
        let mut entries = Vec::new();
        for (n, line) in lines {
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
                path: origin.to_string(),
                line: n + 1,
                reason: e.to_string(),
            })?;
            entries.push(entry);
        }
        let m = Manifest {
            dataset_id: header.dataset_id.parse()?,
            au_vocabulary: header.au_vocabulary,
            entries,
            root: root.into(),
        };
        m.validate(origin)?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            dataset_id: self.dataset_id.to_string(),
            au_vocabulary: self.au_vocabulary.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serialises"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.subject.as_str()).collect()
    }

    pub fn loso_folds(&self) -> Result<Vec<Fold>> {
        loso_folds(self.subjects())
    }
}

/// One leave-one-subject-out split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test_subject: String,
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

/// One fold per distinct subject, in sorted subject order.
pub fn loso_folds<'a>(subjects: impl IntoIterator<Item = &'a str>) -> Result<Vec<Fold>> {
    let all: BTreeSet<String> = subjects.into_iter().map(str::to_string).collect();
    if all.len() < 2 {
        return Err(Error::TooFewSubjects(all.len()));
    }
    Ok(all
        .iter()
        .map(|s| Fold {
            test_subject: s.clone(),
            train: all.iter().filter(|t| *t != s).cloned().collect(),
            test: BTreeSet::from([s.clone()]),
        })
        .collect())
}

/// Number of frames in an apex-neighbour window.
pub const APEX_WINDOW: usize = 7;

/// The apex frame and its six neighbours (three per side). Near either end
/// of the sequence the window is shifted, never shrunk.
pub fn expand_apex_neighbors(apex_index: usize, len: usize) -> Result<[usize; APEX_WINDOW]> {
    if len < APEX_WINDOW {
        return Err(Error::SequenceTooShort {
            len,
            needed: APEX_WINDOW,
        });
    }
    if apex_index >= len {
        return Err(Error::invalid(format!(
            "apex index {apex_index} outside a {len}-frame sequence"
        )));
    }
    let start = apex_index.saturating_sub(APEX_WINDOW / 2).min(len - APEX_WINDOW);
    Ok(std::array::from_fn(|i| start + i))
}

/// Decoded samples of a manifest, with excluded labels dropped.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dataset_id: DatasetId,
    pub au_vocabulary: Vec<String>,
    pub samples: Vec<Sample>,
    /// Samples dropped because their label is outside the three classes.
    pub excluded: usize,
    /// Frames for which the face detector found nothing.
    pub flagged_frames: usize,
}

const FRAME_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "jpe"];

/// Image files of a clip directory in name order (frame files are
/// zero-padded, so lexicographic order is temporal order).
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

impl Dataset {
    /// Reads every clip of `manifest`, applying `detector` to each frame.
    pub fn load(manifest: &Manifest, detector: &dyn FaceDetector) -> Result<Self> {
        let mut samples = Vec::new();
        let mut excluded = 0;
        let mut flagged_frames = 0;
        for entry in &manifest.entries {
            let coarse = match map_emotion(&entry.emotion_raw, manifest.dataset_id)? {
                EmotionMapping::Keep(c) => c,
                EmotionMapping::Exclude => {
                    log::debug!("dropping {} (label `{}`)", entry.clip_dir, entry.emotion_raw);
                    excluded += 1;
                    continue;
                }
            };
            let dir = manifest.root.join(&entry.clip_dir);
            let paths = list_frames(&dir)?;
            if paths.is_empty() {
                return Err(Error::MissingArtifact(format!(
                    "no frames in clip directory {}",
                    dir.display()
                )));
            }
            if entry.apex_index >= paths.len() {
                return Err(Error::invalid(format!(
                    "{}: apex index {} outside {} frames",
                    entry.clip_dir,
                    entry.apex_index,
                    paths.len()
                )));
            }
            let mut frames = Vec::with_capacity(paths.len());
            for p in &paths {
                let crop = face_crop(&load_image(p)?, detector)?;
                flagged_frames += crop.flagged as usize;
                frames.push(crop.image);
            }
            samples.push(Sample {
                id: entry.clip_dir.clone(),
                subject_id: entry.subject.clone(),
                emotion: EmotionLabel {
                    raw_name: entry.emotion_raw.clone(),
                    coarse,
                },
                aus: AuVector::from_names(&entry.au_names(), &manifest.au_vocabulary)?,
                apex_index: entry.apex_index,
                frames,
            });
        }
        if excluded > 0 {
            log::info!("excluded {excluded} samples with labels outside the three classes");
        }
        Ok(Dataset {
            dataset_id: manifest.dataset_id,
            au_vocabulary: manifest.au_vocabulary.clone(),
            samples,
            excluded,
            flagged_frames,
        })
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.subject_id.as_str()).collect()
    }

    pub fn loso_folds(&self) -> Result<Vec<Fold>> {
        loso_folds(self.subjects())
    }

    /// Indices of samples whose subject is in `subjects`.
    pub fn indices_for(&self, subjects: &BTreeSet<String>) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| subjects.contains(&s.subject_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_au(&self) -> usize {
        self.au_vocabulary.len()
    }

    pub fn class_counts(&self) -> BTreeMap<CoarseEmotion, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.emotion.coarse).or_insert(0) += 1;
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_label_tables() {
        use CoarseEmotion::*;
        let keep = |raw, ds| map_emotion(raw, ds).unwrap();
        assert_eq!(keep("happiness", DatasetId::Casme2), EmotionMapping::Keep(Positive));
        assert_eq!(keep("disgust", DatasetId::Casme2), EmotionMapping::Keep(Negative));
        assert_eq!(keep("surprise", DatasetId::Samm), EmotionMapping::Keep(Surprise));
        assert_eq!(keep("contempt", DatasetId::Samm), EmotionMapping::Keep(Negative));
        assert_eq!(keep("Anger", DatasetId::Mmew), EmotionMapping::Keep(Negative));
        assert_eq!(keep("fear", DatasetId::Casme3), EmotionMapping::Keep(Negative));
        assert_eq!(keep("others", DatasetId::Casme2), EmotionMapping::Exclude);
        assert_eq!(keep("repression", DatasetId::Casme2), EmotionMapping::Exclude);
    }

    #[test]
    fn unknown_label_names_label_and_dataset() {
        let err = map_emotion("contempt", DatasetId::Casme2).unwrap_err().to_string();
        assert!(err.contains("contempt") && err.contains("casme2"), "{err}");
        assert!(map_emotion("joy", DatasetId::Samm).is_err());
    }

    #[test]
    fn mapping_is_surjective_per_dataset() {
        let tables: [(DatasetId, &[&str]); 5] = [
            (DatasetId::Casme2, &["happiness", "disgust", "sadness", "fear", "surprise"]),
            (DatasetId::Casme3, &["happiness", "disgust", "sadness", "fear", "surprise"]),
            (DatasetId::Samm, &["happiness", "sadness", "contempt", "anger", "fear", "disgust", "surprise"]),
            (DatasetId::Mmew, &["happiness", "sadness", "contempt", "anger", "fear", "disgust", "surprise"]),
            (DatasetId::Synthetic, &["positive", "negative", "surprise"]),
        ];
        for (ds, labels) in tables {
            let image: BTreeSet<CoarseEmotion> = labels
                .iter()
                .map(|l| match map_emotion(l, ds).unwrap() {
                    EmotionMapping::Keep(c) => c,
                    EmotionMapping::Exclude => panic!("{l} excluded"),
                })
                .collect();
            assert_eq!(image.len(), 3, "{ds}");
        }
    }

    #[test]
    fn dataset_aliases() {
        assert_eq!("CASME II".parse::<DatasetId>().unwrap(), DatasetId::Casme2);
        assert_eq!("CAS(ME)^3".parse::<DatasetId>().unwrap(), DatasetId::Casme3);
        assert!("fer2013".parse::<DatasetId>().is_err());
    }

    #[test]
    fn apex_window_examples() {
        assert_eq!(expand_apex_neighbors(10, 30).unwrap(), [7, 8, 9, 10, 11, 12, 13]);
        assert_eq!(expand_apex_neighbors(1, 30).unwrap(), [0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(expand_apex_neighbors(29, 30).unwrap(), [23, 24, 25, 26, 27, 28, 29]);
        assert_eq!(expand_apex_neighbors(3, 7).unwrap(), [0, 1, 2, 3, 4, 5, 6]);
        assert!(matches!(
            expand_apex_neighbors(2, 6),
            Err(Error::SequenceTooShort { len: 6, needed: 7 })
        ));
        assert!(expand_apex_neighbors(30, 30).is_err());
    }

    #[test]
    fn loso_small_cases() {
        let folds = loso_folds(["B", "A", "C", "A"]).unwrap();
        let tests: Vec<_> = folds.iter().map(|f| f.test_subject.as_str()).collect();
        assert_eq!(tests, ["A", "B", "C"]);
        assert_eq!(folds[0].train, BTreeSet::from(["B".to_string(), "C".to_string()]));
        assert!(matches!(loso_folds(["A"]), Err(Error::TooFewSubjects(1))));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let vocab = vec!["AU1".to_string(), "AU12".to_string()];
        let entry = ManifestEntry {
            clip_dir: "s1/c1".into(),
            subject: "s1".into(),
            emotion_raw: "happiness".into(),
            au_list: "AU12".into(),
            apex_index: 3,
        };
        let m = Manifest::new(DatasetId::Casme2, vocab.clone(), vec![entry.clone()], "/data").unwrap();
        let back = Manifest::parse(&m.to_jsonl(), "/data", "mem").unwrap();
        assert_eq!(back, m);

        let mut bad = entry.clone();
        bad.au_list = "AU1;AU99".into();
        let err = Manifest::new(DatasetId::Casme2, vocab.clone(), vec![bad], "/").unwrap_err();
        assert!(err.to_string().contains("AU99"));

        let mut anon = entry;
        anon.subject = " ".into();
        assert!(Manifest::new(DatasetId::Casme2, vocab, vec![anon], "/").is_err());

        let text = "{\"dataset_id\":\"nope\",\"au_vocabulary\":[\"AU1\"]}\n";
        assert!(matches!(
            Manifest::parse(text, "/", "mem"),
            Err(Error::UnsupportedDataset(_))
        ));
    }

    #[test]
    fn au_vector_from_names() {
        let vocab: Vec<String> = ["AU1", "AU2", "AU12"].iter().map(|s| s.to_string()).collect();
        let v = AuVector::from_names(&["AU12", "AU1"], &vocab).unwrap();
        assert_eq!(v.bits(), &[true, false, true]);
        assert_eq!(v.names(&vocab), ["AU1", "AU12"]);
        assert!(AuVector::from_names(&["AU5"], &vocab).is_err());
    }
}

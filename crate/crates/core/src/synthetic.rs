//! Procedural micro-expression clips: a schematic face whose action-unit
//! blobs swell towards the apex frame and fade again.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    AuVector, CoarseEmotion, Dataset, DatasetId, EmotionLabel, Manifest, ManifestEntry, Sample,
};
use crate::error::{Error, Result};
use crate::preprocess::Image;
use crate::seed;

/// One Gaussian blob in face coordinates: `dx` is the horizontal offset
/// from the face midline, `y` the height, both as fractions of the image.
#[derive(Clone, Copy, Debug)]
struct Blob {
    dx: f32,
    y: f32,
    sigma: f32,
    amp: f32,
    /// Mirror to the other side of the face as well.
    bilateral: bool,
}

const fn blob(dx: f32, y: f32, sigma: f32, amp: f32, bilateral: bool) -> Blob {
    Blob { dx, y, sigma, amp, bilateral }
}

/// Appearance change of each supported action unit.
const AU_TABLE: [(u32, &[Blob]); 12] = [
    (1, &[blob(0.08, 0.26, 0.04, -0.35, true)]),
    (2, &[blob(0.22, 0.25, 0.04, -0.35, true)]),
    (4, &[blob(0.0, 0.33, 0.05, -0.4, false), blob(0.1, 0.34, 0.03, -0.2, true)]),
    (5, &[blob(0.15, 0.40, 0.035, 0.35, true)]),
    (6, &[blob(0.2, 0.55, 0.06, 0.2, true)]),
    (7, &[blob(0.15, 0.43, 0.03, -0.25, true)]),
    (9, &[blob(0.0, 0.50, 0.04, -0.25, false)]),
    (10, &[blob(0.0, 0.63, 0.04, -0.25, false)]),
    (12, &[blob(0.14, 0.67, 0.04, -0.4, true), blob(0.0, 0.73, 0.05, 0.15, false)]),
    (14, &[blob(0.19, 0.72, 0.03, -0.2, true)]),
    (15, &[blob(0.13, 0.79, 0.04, -0.35, true)]),
    (17, &[blob(0.0, 0.86, 0.05, -0.25, false)]),
];

const NEUTRAL_FEATURES: [Blob; 5] = [
    blob(0.15, 0.41, 0.035, -0.45, true), // eyes
    blob(0.15, 0.31, 0.03, -0.3, true),   // brows
    blob(0.0, 0.55, 0.03, -0.15, false),  // nose
    blob(0.0, 0.72, 0.04, -0.4, false),   // mouth
    blob(0.07, 0.72, 0.035, -0.25, true), // mouth width
];

fn au_blobs(au: u32) -> Option<&'static [Blob]> {
    AU_TABLE.iter().find(|(n, _)| *n == au).map(|(_, b)| *b)
}

/// `AU1`, `AU2`, ... for every supported action unit, in table order.
pub fn au_vocabulary() -> Vec<String> {
    AU_TABLE.iter().map(|(n, _)| format!("AU{n}")).collect()
}

pub fn default_blueprint() -> BTreeMap<CoarseEmotion, BTreeSet<u32>> {
    BTreeMap::from([
        (CoarseEmotion::Positive, BTreeSet::from([12])),
        (CoarseEmotion::Negative, BTreeSet::from([4])),
        (CoarseEmotion::Surprise, BTreeSet::from([1, 2, 5])),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub image_size: usize,
    /// Frames per clip; the apex sits at `frames / 2`.
    pub frames: usize,
    /// Action units (by FACS number) expressed by each emotion.
    pub au_blueprint: BTreeMap<CoarseEmotion, BTreeSet<u32>>,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 6,
            samples_per_subject: 12,
            image_size: 32,
            frames: 9,
            au_blueprint: default_blueprint(),
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::TooFewSubjects(self.n_subjects));
        }
        if self.samples_per_subject == 0 {
            return Err(Error::invalid("samples_per_subject must be at least 1"));
        }
        if self.image_size < 8 {
            return Err(Error::invalid("image_size must be at least 8"));
        }
        if self.frames < crate::data::APEX_WINDOW {
            return Err(Error::SequenceTooShort {
                len: self.frames,
                needed: crate::data::APEX_WINDOW,
            });
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a finite non-negative number"));
        }
        let mut seen = BTreeSet::new();
        for e in CoarseEmotion::ALL {
            let set = self
                .au_blueprint
                .get(&e)
                .ok_or_else(|| Error::invalid(format!("blueprint has no entry for {e}")))?;
            if let Some(au) = set.iter().find(|a| au_blobs(**a).is_none()) {
                return Err(Error::invalid(format!("blueprint uses unsupported AU{au}")));
            }
            if !seen.insert(set.clone()) {
                return Err(Error::invalid(format!("blueprint AU set of {e} repeats another emotion")));
            }
        }
        Ok(())
    }

    pub fn apex_index(&self) -> usize {
        self.frames / 2
    }

    /// Relative AU intensity of frame `t`: a triangle peaking at the apex.
    pub fn intensity(&self, t: usize) -> f32 {
        let apex = self.apex_index() as f32;
        let half = (self.frames - self.apex_index()) as f32;
        (1.0 - (t as f32 - apex).abs() / half).max(0.0)
    }
}

/// Per-subject appearance.
struct Identity {
    cx: f32,
    cy: f32,
    scale: f32,
    skin: [f32; 3],
    background: [f32; 3],
    feature_shift: f32,
}

impl Identity {
    fn draw(rng: &mut impl Rng) -> Self {
        let tone = rng.random_range(0.55..0.8);
        Identity {
            cx: 0.5 + rng.random_range(-0.03..0.03),
            cy: 0.5 + rng.random_range(-0.03..0.03),
            scale: rng.random_range(0.92..1.05),
            skin: [tone + 0.1, tone, tone - 0.1],
            background: [rng.random_range(0.1..0.3); 3],
            feature_shift: rng.random_range(-0.015..0.015),
        }
    }
}

const CHANNEL_TINT: [f32; 3] = [1.0, 0.9, 0.8];

fn render(
    id: &Identity,
    size: usize,
    aus: &[&[Blob]],
    strength: f32,
    noise: f32,
    rng: &mut impl Rng,
) -> Image {
    let n = size as f32;
    let mut blobs: Vec<(f32, f32, f32, f32)> = Vec::new();
    let mut push = |b: &Blob, gain: f32| {
        let y = id.cy + (b.y - 0.5 + id.feature_shift) * id.scale;
        let sigma = b.sigma * id.scale;
        blobs.push((id.cx + b.dx * id.scale, y, sigma, b.amp * gain));
        if b.bilateral && b.dx != 0.0 {
            blobs.push((id.cx - b.dx * id.scale, y, sigma, b.amp * gain));
        }
    };
    for b in &NEUTRAL_FEATURES {
        push(b, 1.0);
    }
    for au in aus {
        for b in *au {
            push(b, strength);
        }
    }
    let normal = Normal::new(0.0f32, noise.max(f32::MIN_POSITIVE)).expect("valid std");
    let (rx, ry) = (0.34 * id.scale, 0.44 * id.scale);
    let mut img = Image::from_fn(size, size, |c, y, x| {
        let (u, v) = ((x as f32 + 0.5) / n, (y as f32 + 0.5) / n);
        let r = ((u - id.cx) / rx).powi(2) + ((v - id.cy) / ry).powi(2);
        // soft face edge
        let face = 1.0 / (1.0 + ((r - 1.0) * 12.0).exp());
        let mut val = id.background[c] * (1.0 - face) + id.skin[c] * face;
        for &(bx, by, s, a) in &blobs {
            let d2 = (u - bx).powi(2) + (v - by).powi(2);
            val += a * CHANNEL_TINT[c] * (-d2 / (2.0 * s * s)).exp() * face;
        }
        val
    });
    if noise > 0.0 {
        let data: Vec<f32> = img.data().iter().map(|v| v + normal.sample(rng)).collect();
        img = Image::new(size, size, data).expect("same shape");
    }
    img.quantize();
    img
}

/// A generated dataset together with the manifest describing it.
#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub spec: SyntheticSpec,
    pub manifest: Manifest,
    pub dataset: Dataset,
}

fn subject_name(s: usize) -> String {
    format!("sub{s:02}")
}

/// Builds every sample in memory. Frames are quantized to 8-bit levels so
/// they equal what [`SyntheticSet::write`] puts on disk.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let vocab = au_vocabulary();
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    for s in 0..spec.n_subjects {
        let subject = subject_name(s);
        let id = Identity::draw(&mut seed::rng(spec.seed, &[seed::tag("subject"), s as u64]));
        for k in 0..spec.samples_per_subject {
            let mut rng = seed::rng(spec.seed, &[seed::tag("sample"), s as u64, k as u64]);
            let emotion = CoarseEmotion::ALL[k % 3];
            let au_set = &spec.au_blueprint[&emotion];
            let blobs: Vec<&[Blob]> = au_set.iter().map(|a| au_blobs(*a).expect("validated")).collect();
            let peak = rng.random_range(0.75..1.0);
            let frames: Vec<Image> = (0..spec.frames)
                .map(|t| render(&id, spec.image_size, &blobs, peak * spec.intensity(t), spec.noise, &mut rng))
                .collect();
            let au_names: Vec<String> = au_set.iter().map(|a| format!("AU{a}")).collect();
            let clip_dir = format!("{subject}/s{k:03}");
            let raw = emotion.name().to_ascii_lowercase();
            entries.push(ManifestEntry {
                clip_dir: clip_dir.clone(),
                subject: subject.clone(),
                emotion_raw: raw.clone(),
                au_list: au_names.join(";"),
                apex_index: spec.apex_index(),
            });
            samples.push(Sample {
                id: clip_dir,
                subject_id: subject.clone(),
                emotion: EmotionLabel { raw_name: raw, coarse: emotion },
                aus: AuVector::from_names(&au_names, &vocab)?,
                apex_index: spec.apex_index(),
                frames,
            });
        }
    }
    Ok(SyntheticSet {
        spec: spec.clone(),
        manifest: Manifest::new(DatasetId::Synthetic, vocab.clone(), entries, "")?,
        dataset: Dataset {
            dataset_id: DatasetId::Synthetic,
            au_vocabulary: vocab,
            samples,
            excluded: 0,
            flagged_frames: 0,
        },
    })
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl SyntheticSet {
    /// Writes `subject/sample/frame_NNNN.png` files and `manifest.jsonl`
    /// under `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        for sample in &self.dataset.samples {
            let clip = dir.join(&sample.id);
            fs::create_dir_all(&clip).map_err(|e| Error::io(&clip, e))?;
            for (t, frame) in sample.frames.iter().enumerate() {
                frame.save(&clip.join(format!("frame_{t:04}.png")))?;
            }
        }
        let path = dir.join(MANIFEST_FILE);
        self.manifest.save(&path)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_subjects: 4,
            samples_per_subject: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn balanced_counts() {
        let set = generate(&small()).unwrap();
        assert_eq!(set.dataset.samples.len(), 24);
        assert!(set.dataset.class_counts().values().all(|&n| n == 8));
        assert_eq!(set.manifest.subjects().len(), 4);
    }

    #[test]
    fn deterministic_at_zero_noise() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.dataset.samples.iter().zip(&b.dataset.samples) {
            assert_eq!(x.frames, y.frames);
        }
    }

    #[test]
    fn positive_sample_has_only_au12() {
        let set = generate(&small()).unwrap();
        let vocab = &set.dataset.au_vocabulary;
        let pos = set
            .dataset
            .samples
            .iter()
            .find(|s| s.emotion.coarse == CoarseEmotion::Positive)
            .unwrap();
        assert_eq!(pos.aus.names(vocab), ["AU12"]);
    }

    #[test]
    fn apex_has_peak_intensity() {
        let spec = SyntheticSpec::default();
        let peak = (0..spec.frames)
            .max_by(|a, b| spec.intensity(*a).total_cmp(&spec.intensity(*b)))
            .unwrap();
        assert_eq!(peak, spec.apex_index());
        assert!((0..spec.frames).filter(|&t| t != peak).all(|t| spec.intensity(t) < 1.0));
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SyntheticSpec { n_subjects: 1, ..small() }).is_err());
        assert!(generate(&SyntheticSpec { samples_per_subject: 0, ..small() }).is_err());
        let mut bp = default_blueprint();
        bp.insert(CoarseEmotion::Negative, BTreeSet::from([12]));
        assert!(generate(&SyntheticSpec { au_blueprint: bp, ..small() }).is_err());
        let mut bp = default_blueprint();
        bp.insert(CoarseEmotion::Negative, BTreeSet::from([3]));
        assert!(generate(&SyntheticSpec { au_blueprint: bp, ..small() }).is_err());
    }
}

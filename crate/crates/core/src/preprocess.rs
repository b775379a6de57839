//! Face cropping, resize/crop, augmentation and clip assembly.

use std::path::Path;

use famnet_tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Channel-major: `data[c * height * width + y * width + x]`.
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::invalid(format!(
                "image {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (c, v) in rgb.iter().enumerate() {
            data[c * plane..(c + 1) * plane].fill(*v);
        }
        Image { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(w, h, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Rounds every value to the nearest 8-bit level, matching what a
    /// PNG round trip would produce.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(Error::invalid(format!(
                "crop ({x0},{y0},{x1},{y1}) outside a {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(x1 - x0, y1 - y0, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Bilinear sample with border replication; `(u, v)` in pixel-centre
    /// coordinates.
    fn sample(&self, c: usize, v: f32, u: f32) -> f32 {
        let u = u.clamp(0.0, (self.width - 1) as f32);
        let v = v.clamp(0.0, (self.height - 1) as f32);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (u - x0 as f32, v - y0 as f32);
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bottom = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize (half-pixel centres).
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Self::from_fn(width, height, |c, y, x| {
            self.sample(c, (y as f32 + 0.5) * sy - 0.5, (x as f32 + 0.5) * sx - 0.5)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    /// Rotation about the image centre, counter-clockwise in degrees.
    pub fn rotate(&self, degrees: f32) -> Self {
        if degrees == 0.0 {
            return self.clone();
        }
        let (s, co) = degrees.to_radians().sin_cos();
        let cx = (self.width as f32 - 1.0) / 2.0;
        let cy = (self.height as f32 - 1.0) / 2.0;
        Self::from_fn(self.width, self.height, |c, y, x| {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            let u = co * dx - s * dy + cx;
            let v = s * dx + co * dy + cy;
            self.sample(c, v, u)
        })
    }

    pub fn scale_brightness(&self, factor: f32) -> Self {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| (v * factor).clamp(0.0, 1.0)).collect(),
        }
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Image::from_rgb8(&img.to_rgb8()))
}

/// Face rectangle `[x0, x1) × [y0, y1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaceBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// Face-region provider. Returns at most one box.
pub trait FaceDetector: Send + Sync {
    fn detect(&self, image: &Image) -> Option<FaceBox>;
}

/// Treats the whole frame as the face; for inputs that are already cropped.
#[derive(Clone, Copy, Debug, Default)]
pub struct FullFrame;

impl FaceDetector for FullFrame {
    fn detect(&self, image: &Image) -> Option<FaceBox> {
        Some(FaceBox {
            x0: 0,
            y0: 0,
            x1: image.width(),
            y1: image.height(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct FaceCrop {
    pub image: Image,
    /// No face was found and the centre square was used instead.
    pub flagged: bool,
}

pub fn face_crop(image: &Image, detector: &dyn FaceDetector) -> Result<FaceCrop> {
    match detector.detect(image) {
        Some(b) => Ok(FaceCrop {
            image: image.crop(b.x0, b.y0, b.x1, b.y1)?,
            flagged: false,
        }),
        None => {
            let side = image.width().min(image.height());
            let x0 = (image.width() - side) / 2;
            let y0 = (image.height() - side) / 2;
            Ok(FaceCrop {
                image: image.crop(x0, y0, x0 + side, y0 + side)?,
                flagged: true,
            })
        }
    }
}

/// Output size and the intermediate canvas the crop is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropGeometry {
    pub size: usize,
    pub canvas_height: usize,
    pub canvas_width: usize,
}

impl CropGeometry {
    /// 234×240 canvas cropped to 224; other sizes scale the canvas in
    /// proportion.
    pub fn for_size(size: usize) -> Self {
        let scale = |c: usize| ((size * c) as f64 / 224.0).round() as usize;
        CropGeometry {
            size,
            canvas_height: scale(234).max(size),
            canvas_width: scale(240).max(size),
        }
    }

    /// Top-left corner of a uniformly random crop window.
    pub fn random_offset(&self, rng: &mut impl Rng) -> (usize, usize) {
        (
            rng.random_range(0..=self.canvas_height - self.size),
            rng.random_range(0..=self.canvas_width - self.size),
        )
    }

    pub fn center_offset(&self) -> (usize, usize) {
        (
            (self.canvas_height - self.size) / 2,
            (self.canvas_width - self.size) / 2,
        )
    }
}

impl Default for CropGeometry {
    fn default() -> Self {
        Self::for_size(224)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Central window; an input already at the output size passes through.
    Eval,
    /// Window at `(top, left)` on the canvas.
    Train { top: usize, left: usize },
}

pub fn resize_and_crop(image: &Image, geom: &CropGeometry, mode: CropMode) -> Result<Image> {
    let (top, left) = match mode {
        CropMode::Eval if image.width() == geom.size && image.height() == geom.size => {
            return Ok(image.clone())
        }
        CropMode::Eval => geom.center_offset(),
        CropMode::Train { top, left } => (top, left),
    };
    let canvas = image.resize(geom.canvas_width, geom.canvas_height);
    canvas.crop(left, top, left + geom.size, top + geom.size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub enabled: bool,
    /// Rotation drawn uniformly from `±rotation_degrees`.
    pub rotation_degrees: f32,
    pub flip_probability: f64,
    /// Multiplicative brightness factor range.
    pub brightness: (f32, f32),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            rotation_degrees: 10.0,
            flip_probability: 0.5,
            brightness: (0.8, 1.2),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..Self::default()
        }
    }

    /// Draws one transform; every frame of a clip shares it.
    pub fn sample(&self, rng: &mut impl Rng) -> Augment {
        if !self.enabled {
            return Augment::IDENTITY;
        }
        let rotation = if self.rotation_degrees > 0.0 {
            rng.random_range(-self.rotation_degrees..=self.rotation_degrees)
        } else {
            0.0
        };
        let flip = rng.random_bool(self.flip_probability.clamp(0.0, 1.0));
        let (lo, hi) = self.brightness;
        let brightness = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Augment {
            rotation,
            flip,
            brightness,
        }
    }
}

/// A concrete draw from an [`AugmentPolicy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub rotation: f32,
    pub flip: bool,
    pub brightness: f32,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        rotation: 0.0,
        flip: false,
        brightness: 1.0,
    };

    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.rotate(self.rotation);
        if self.flip {
            out = out.flip_horizontal();
        }
        if self.brightness != 1.0 {
            out = out.scale_brightness(self.brightness);
        }
        out
    }
}

fn normalize(v: f32) -> f32 {
    (v - 0.5) / 0.5
}

/// Frame indices for a clip of `depth` drawn from `len` frames: rounded
/// linspace when there are enough frames, otherwise every frame followed by
/// repeats of the last.
pub fn temporal_indices(len: usize, depth: usize) -> Vec<usize> {
    if len >= depth {
        if depth == 1 {
            return vec![0];
        }
        (0..depth)
            .map(|i| ((i * (len - 1)) as f64 / (depth - 1) as f64).round() as usize)
            .collect()
    } else {
        (0..depth).map(|i| i.min(len - 1)).collect()
    }
}

/// Normalized `(3, 1, H, W)` tensor of one frame.
pub fn image_tensor<T: Scalar>(image: &Image) -> Tensor<T> {
    let data = image.data().iter().map(|&v| T::cast(normalize(v) as f64)).collect();
    Tensor::new([3, 1, image.height(), image.width()], data).expect("shape matches")
}

/// Normalized `(3, depth, H, W)` clip tensor; frames must share one size.
pub fn assemble_clip<T: Scalar>(frames: &[Image], depth: usize) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("cannot assemble a clip from zero frames"))?;
    if depth == 0 {
        return Err(Error::invalid("clip depth must be positive"));
    }
    let (h, w) = (first.height(), first.width());
    if let Some(f) = frames.iter().find(|f| f.height() != h || f.width() != w) {
        return Err(Error::invalid(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            w,
            h,
            f.width(),
            f.height()
        )));
    }
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * depth * plane];
    for (t, &i) in temporal_indices(frames.len(), depth).iter().enumerate() {
        let src = frames[i].data();
        for c in 0..3 {
            let dst = &mut data[(c * depth + t) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(&src[c * plane..(c + 1) * plane]) {
                *d = T::cast(normalize(s) as f64);
            }
        }
    }
    Ok(Tensor::new([3, depth, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |c, y, x| ((x * 7 + y * 3 + c * 11) % 17) as f32 / 16.0)
    }

    struct Boxed(Option<FaceBox>);
    impl FaceDetector for Boxed {
        fn detect(&self, _: &Image) -> Option<FaceBox> {
            self.0
        }
    }

    #[test]
    fn face_box_crop_and_fallback() {
        let img = pattern(300, 250);
        let b = FaceBox { x0: 10, y0: 10, x1: 200, y1: 200 };
        let crop = face_crop(&img, &Boxed(Some(b))).unwrap();
        assert_eq!((crop.image.width(), crop.image.height()), (190, 190));
        assert!(!crop.flagged);
        assert_eq!(crop.image.get(1, 0, 0), img.get(1, 10, 10));

        let crop = face_crop(&img, &Boxed(None)).unwrap();
        assert!(crop.flagged);
        assert_eq!((crop.image.width(), crop.image.height()), (250, 250));
        assert_eq!(crop.image.get(0, 0, 0), img.get(0, 0, 25));

        let crop = face_crop(&img, &FullFrame).unwrap();
        assert_eq!(crop.image, img);
    }

    #[test]
    fn resize_and_crop_sizes() {
        let geom = CropGeometry::default();
        assert_eq!((geom.canvas_height, geom.canvas_width), (234, 240));
        let out = resize_and_crop(&pattern(640, 480), &geom, CropMode::Eval).unwrap();
        assert_eq!((out.width(), out.height()), (224, 224));

        let canvas = pattern(240, 234);
        let out = resize_and_crop(&canvas, &geom, CropMode::Eval).unwrap();
        assert_eq!(out, canvas.crop(8, 5, 232, 229).unwrap());

        let small = pattern(224, 224);
        assert_eq!(resize_and_crop(&small, &geom, CropMode::Eval).unwrap(), small);
    }

    #[test]
    fn seeded_train_crops_repeat() {
        let geom = CropGeometry::for_size(32);
        let img = pattern(50, 40);
        let crop = |seed| {
            let (top, left) = geom.random_offset(&mut ChaCha8Rng::seed_from_u64(seed));
            resize_and_crop(&img, &geom, CropMode::Train { top, left }).unwrap()
        };
        assert_eq!(crop(3), crop(3));
        assert_eq!(crop(3).width(), 32);
    }

    #[test]
    fn double_flip_restores_geometry() {
        let policy = AugmentPolicy {
            enabled: true,
            rotation_degrees: 0.0,
            flip_probability: 1.0,
            brightness: (1.0, 1.0),
        };
        let img = pattern(9, 6);
        let once = policy.sample(&mut ChaCha8Rng::seed_from_u64(1)).apply(&img);
        assert_ne!(once, img);
        let twice = policy.sample(&mut ChaCha8Rng::seed_from_u64(1)).apply(&once);
        assert_eq!(twice, img);
    }

    #[test]
    fn disabled_policy_is_identity() {
        let img = pattern(8, 8);
        let a = AugmentPolicy::disabled().sample(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(a, Augment::IDENTITY);
        assert_eq!(a.apply(&img), img);
    }

    #[test]
    fn rotation_by_zero_and_small_angles() {
        let img = Image::filled(10, 10, [0.3, 0.6, 0.9]);
        let r = img.rotate(7.0);
        assert!(r.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn temporal_index_oracle() {
        assert_eq!(temporal_indices(16, 16), (0..16).collect::<Vec<_>>());
        assert_eq!(
            temporal_indices(9, 16),
            [0, 1, 2, 3, 4, 5, 6, 7, 8, 8, 8, 8, 8, 8, 8, 8]
        );
        // round(i * 39 / 15)
        assert_eq!(
            temporal_indices(40, 16),
            [0, 3, 5, 8, 10, 13, 16, 18, 21, 23, 26, 29, 31, 34, 36, 39]
        );
    }

    #[test]
    fn clip_layout_and_range() {
        let frames: Vec<Image> = (0..16).map(|t| Image::filled(4, 3, [t as f32 / 15.0, 0.0, 1.0])).collect();
        let clip = assemble_clip::<f32>(&frames, 16).unwrap();
        assert_eq!(clip.shape(), &[3, 16, 3, 4]);
        assert!(clip.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(clip.at(&[0, 0, 0, 0]), -1.0);
        assert_eq!(clip.at(&[0, 15, 2, 3]), 1.0);
        assert_eq!(clip.at(&[2, 7, 1, 1]), 1.0);
        assert!(assemble_clip::<f32>(&[], 16).is_err());
    }
}

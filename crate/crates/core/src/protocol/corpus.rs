//! Procedural multi-domain image corpus.
//!
//! Every class owns a parametric pattern: a soft-edged shape at a jittered
//! position, filled with a striped texture, over a two-tone background.
//! One base image is rendered per `(class, index)`; each domain applies a
//! deterministic transform to it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{self, Fnv1a};

pub const CHANNELS: usize = 3;
pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainTransform {
    Identity,
    /// Additive noise with this standard deviation on the [0, 1] scale.
    GaussianNoise { sigma: f32 },
    /// Mean filter over a `(2r+1)²` window, clamped at the border.
    BoxBlur { radius: usize },
    /// Pull every channel toward its image mean by this factor.
    Contrast { factor: f32 },
    /// Rotation about the image center, bilinear, clamped at the border.
    Rotation { degrees: f32 },
    /// Replace each `block × block` cell by its mean.
    Pixelate { block: usize },
}

impl DomainTransform {
    pub fn name(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::GaussianNoise { sigma } => format!("noise{sigma}"),
            Self::BoxBlur { radius } => format!("blur{radius}"),
            Self::Contrast { factor } => format!("contrast{factor}"),
            Self::Rotation { degrees } => format!("rotate{degrees}"),
            Self::Pixelate { block } => format!("pixelate{block}"),
        }
    }

    fn fingerprint(&self, h: &mut Fnv1a) {
        h.write(self.name().as_bytes());
    }

    /// Transform one `size × size` RGB image.
    pub fn apply(&self, base: &[u8], size: usize) -> Vec<u8> {
        let f: Vec<f32> = base.iter().map(|&v| f32::from(v) / 255.0).collect();
        let out = match *self {
            Self::Identity => return base.to_vec(),
            Self::GaussianNoise { sigma } => {
                let mut h = Fnv1a::new();
                h.write(base);
                self.fingerprint(&mut h);
                let mut rng = util::rng(h.finish(), &[]);
                let normal = Normal::new(0.0f32, sigma.max(0.0)).expect("finite sigma");
                f.iter().map(|&v| v + normal.sample(&mut rng)).collect()
            }
            Self::BoxBlur { radius } => box_blur(&f, size, radius),
            Self::Contrast { factor } => {
                let mut out = f.clone();
                for c in 0..CHANNELS {
                    let mean = f.iter().skip(c).step_by(CHANNELS).sum::<f32>() / (size * size) as f32;
                    for v in out.iter_mut().skip(c).step_by(CHANNELS) {
                        *v = mean + factor * (*v - mean);
                    }
                }
                out
            }
            Self::Rotation { degrees } => rotate(&f, size, degrees.to_radians()),
            Self::Pixelate { block } => pixelate(&f, size, block.max(1)),
        };
        quantize(&out)
    }
}

fn quantize(f: &[f32]) -> Vec<u8> {
    f.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn box_blur(f: &[f32], size: usize, r: usize) -> Vec<f32> {
    let mut out = vec![0.0; f.len()];
    let s = size as isize;
    let r = r as isize;
    for y in 0..s {
        for x in 0..s {
            let mut acc = [0.0f32; CHANNELS];
            let mut n = 0.0;
            for yy in (y - r).max(0)..=(y + r).min(s - 1) {
                for xx in (x - r).max(0)..=(x + r).min(s - 1) {
                    let i = (yy * s + xx) as usize * CHANNELS;
                    for c in 0..CHANNELS {
                        acc[c] += f[i + c];
                    }
                    n += 1.0;
                }
            }
            let o = (y * s + x) as usize * CHANNELS;
            for c in 0..CHANNELS {
                out[o + c] = acc[c] / n;
            }
        }
    }
    out
}

fn rotate(f: &[f32], size: usize, theta: f32) -> Vec<f32> {
    let mut out = vec![0.0; f.len()];
    let center = (size as f32 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let last = size as f32 - 1.0;
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 - center, y as f32 - center);
            let sx = (cos * dx + sin * dy + center).clamp(0.0, last);
            let sy = (-sin * dx + cos * dy + center).clamp(0.0, last);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
            let (tx, ty) = (sx - x0 as f32, sy - y0 as f32);
            for c in 0..CHANNELS {
                let p = |xx: usize, yy: usize| f[(yy * size + xx) * CHANNELS + c];
                let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                out[(y * size + x) * CHANNELS + c] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

fn pixelate(f: &[f32], size: usize, block: usize) -> Vec<f32> {
    let mut out = vec![0.0; f.len()];
    for by in (0..size).step_by(block) {
        for bx in (0..size).step_by(block) {
            let (ye, xe) = ((by + block).min(size), (bx + block).min(size));
            let n = ((ye - by) * (xe - bx)) as f32;
            for c in 0..CHANNELS {
                let mut s = 0.0;
                for y in by..ye {
                    for x in bx..xe {
                        s += f[(y * size + x) * CHANNELS + c];
                    }
                }
                for y in by..ye {
                    for x in bx..xe {
                        out[(y * size + x) * CHANNELS + c] = s / n;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub classes: usize,
    /// Images per `(class, domain)` pair.
    pub per_pair: usize,
    pub image_size: usize,
    pub domains: Vec<DomainTransform>,
    pub seed: u64,
}

impl CorpusSpec {
    /// 20 classes over 5 domains, 20 images per pair, 32×32 pixels.
    pub fn desk(seed: u64) -> Self {
        Self {
            classes: 20,
            per_pair: 20,
            image_size: 32,
            domains: vec![
                DomainTransform::Identity,
                DomainTransform::GaussianNoise { sigma: 0.1 },
                DomainTransform::Contrast { factor: 0.55 },
                DomainTransform::BoxBlur { radius: 1 },
                DomainTransform::Rotation { degrees: 20.0 },
            ],
            seed,
        }
    }

    /// `classes × domains` corpus with the domain list of [`standard_domains`].
    pub fn with_shape(classes: usize, domains: usize, per_pair: usize, image_size: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            classes,
            per_pair,
            image_size,
            domains: standard_domains(domains)?,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.domains.is_empty() || self.per_pair == 0 {
            return Err(Error::Corpus("corpus needs at least one class, domain and image".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Corpus(format!("image size {} is too small", self.image_size)));
        }
        Ok(())
    }
}

/// `n` distinct transforms. The first `n - 1` come from a fixed pool of
/// photometric and blur shifts; the last is a rotation, so the held-out
/// domains at the end of the list differ geometrically. Five domains give
/// the desk list.
pub fn standard_domains(n: usize) -> Result<Vec<DomainTransform>> {
    use DomainTransform::*;
    let pool = [
        Identity,
        GaussianNoise { sigma: 0.1 },
        Contrast { factor: 0.55 },
        BoxBlur { radius: 1 },
        Pixelate { block: 2 },
        GaussianNoise { sigma: 0.2 },
        Contrast { factor: 0.35 },
        BoxBlur { radius: 2 },
        Rotation { degrees: -10.0 },
        GaussianNoise { sigma: 0.05 },
        Contrast { factor: 0.75 },
        Pixelate { block: 4 },
        Rotation { degrees: 35.0 },
        BoxBlur { radius: 3 },
        Rotation { degrees: -25.0 },
    ];
    match n {
        0 => Err(Error::Corpus("need at least one domain".into())),
        1 => Ok(vec![Identity]),
        n if n - 1 > pool.len() => Err(Error::Corpus(format!("at most {} standard domains exist", pool.len() + 1))),
        n => {
            let mut out = pool[..n - 1].to_vec();
            out.push(Rotation { degrees: 20.0 });
            Ok(out)
        }
    }
}

/// Corpus dimensions, shared by generated and imported corpora.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub name: String,
    pub classes: usize,
    pub domain_names: Vec<String>,
    pub per_pair: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl CorpusInfo {
    pub fn domains(&self) -> usize {
        self.domain_names.len()
    }

    pub fn sample_count(&self) -> usize {
        self.classes * self.domains() * self.per_pair
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    /// Ids enumerate `(class, domain, index)` in row-major order.
    pub fn sample_id(&self, class: usize, domain: usize, index: usize) -> usize {
        (class * self.domains() + domain) * self.per_pair + index
    }

    pub fn locate(&self, id: usize) -> (usize, usize, usize) {
        let index = id % self.per_pair;
        let pair = id / self.per_pair;
        (pair / self.domains(), pair % self.domains(), index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub info: CorpusInfo,
    /// Raw-pixel nearest-prototype accuracy per domain, in percent.
    pub self_check: Vec<f64>,
    pixels: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    info: CorpusInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<CorpusSpec>,
    self_check: Vec<f64>,
    files: Vec<String>,
}

struct ClassStyle {
    shape: usize,
    bg: [f32; 3],
    bg2: [f32; 3],
    fg: [f32; 3],
    freq: f32,
    angle: f32,
}

const SHAPES: usize = 6;

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn style(seed: u64, class: usize) -> ClassStyle {
    let mut rng = util::rng(seed, &[0, class as u64]);
    let bg = color(&mut rng);
    let mut fg = color(&mut rng);
    while fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() < 0.9 {
        fg = color(&mut rng);
    }
    let bg2 = bg.map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
    ClassStyle {
        shape: class % SHAPES,
        bg,
        bg2,
        fg,
        freq: rng.random_range(2.0..6.0),
        angle: rng.random_range(0.0..std::f32::consts::PI),
    }
}

/// Signed distance to the outline, in units of the image side.
fn shape_distance(shape: usize, dx: f32, dy: f32, r: f32) -> f32 {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        0 => (dx * dx + dy * dy).sqrt() - r,
        1 => ax.max(ay) - 0.85 * r,
        2 => ax + ay - 1.2 * r,
        3 => ((dx * dx + dy * dy).sqrt() - r).abs() - 0.3 * r,
        4 => (ax - 0.35 * r).max(ay - r).min((ax - r).max(ay - 0.35 * r)),
        _ => (ax - r).max(ay - 0.4 * r),
    }
}

fn render_base(seed: u64, class: usize, index: usize, size: usize) -> Vec<u8> {
    let st = style(seed, class);
    let mut rng = util::rng(seed, &[1, class as u64, index as u64]);
    let cx = 0.5 + rng.random_range(-0.08..0.08);
    let cy = 0.5 + rng.random_range(-0.08..0.08);
    let r = 0.25 * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let fg = st.fg.map(|v| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
    let bright = rng.random_range(-0.05..0.05);
    let grain = Normal::new(0.0f32, 0.02).expect("valid");
    let (cos, sin) = (st.angle.cos(), st.angle.sin());
    let mut out = Vec::with_capacity(size * size * CHANNELS);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5) / size as f32;
            let v = (y as f32 + 0.5) / size as f32;
            let d = shape_distance(st.shape, u - cx, v - cy, r);
            let cover = (0.5 - d * size as f32).clamp(0.0, 1.0);
            let stripe = 0.5 + 0.5 * (std::f32::consts::TAU * st.freq * (u * cos + v * sin) + phase).sin();
            for c in 0..CHANNELS {
                let back = st.bg[c] * (1.0 - v) + st.bg2[c] * v;
                let front = fg[c] * (0.75 + 0.25 * stripe);
                let val = back * (1.0 - cover) + front * cover + bright + grain.sample(&mut rng);
                out.push(val);
            }
        }
    }
    quantize(&out)
}

/// Render every image of `spec` and run the separability self-check.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let info = CorpusInfo {
        name: format!("synthetic-{}", spec.seed),
        classes: spec.classes,
        domain_names: spec.domains.iter().map(DomainTransform::name).collect(),
        per_pair: spec.per_pair,
        image_size: spec.image_size,
        channels: CHANNELS,
    };
    let len = info.image_len();
    let mut pixels = vec![0u8; info.sample_count() * len];
    for class in 0..spec.classes {
        for index in 0..spec.per_pair {
            let base = render_base(spec.seed, class, index, spec.image_size);
            for (domain, t) in spec.domains.iter().enumerate() {
                let id = info.sample_id(class, domain, index);
                pixels[id * len..(id + 1) * len].copy_from_slice(&t.apply(&base, spec.image_size));
            }
        }
    }
    let mut corpus = Corpus { info, self_check: Vec::new(), pixels };
    corpus.self_check = corpus.separability()?;
    Ok(corpus)
}

impl Corpus {
    pub fn from_parts(info: CorpusInfo, pixels: Vec<u8>) -> Result<Self> {
        if info.classes == 0 || info.domains() == 0 || info.per_pair == 0 || info.channels != CHANNELS {
            return Err(Error::Corpus(format!("degenerate corpus dimensions {info:?}")));
        }
        if pixels.len() != info.sample_count() * info.image_len() {
            return Err(Error::Corpus(format!(
                "expected {} pixel bytes, got {}",
                info.sample_count() * info.image_len(),
                pixels.len()
            )));
        }
        Ok(Self { info, self_check: Vec::new(), pixels })
    }

    pub fn image(&self, id: usize) -> &[u8] {
        let len = self.info.image_len();
        &self.pixels[id * len..(id + 1) * len]
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Per domain: class means of the first half of each pair's images,
    /// then nearest-mean accuracy on the second half. Fails when any
    /// domain does not beat chance.
    pub fn separability(&self) -> Result<Vec<f64>> {
        let info = &self.info;
        let half = (info.per_pair / 2).max(1);
        if info.per_pair < 2 {
            return Ok(vec![f64::NAN; info.domains()]);
        }
        let len = info.image_len();
        let mut out = Vec::with_capacity(info.domains());
        for d in 0..info.domains() {
            let means: Vec<Vec<f64>> = (0..info.classes)
                .map(|c| {
                    let mut m = vec![0.0; len];
                    for k in 0..half {
                        for (a, &v) in m.iter_mut().zip(self.image(info.sample_id(c, d, k))) {
                            *a += f64::from(v);
                        }
                    }
                    m.iter_mut().for_each(|a| *a /= half as f64);
                    m
                })
                .collect();
            let (mut hit, mut total) = (0usize, 0usize);
            for c in 0..info.classes {
                for k in half..info.per_pair {
                    let img = self.image(info.sample_id(c, d, k));
                    let best = (0..info.classes)
                        .map(|j| {
                            let dist: f64 = means[j].iter().zip(img).map(|(m, &v)| (m - f64::from(v)).powi(2)).sum();
                            (j, dist)
                        })
                        .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b });
                    hit += usize::from(best.0 == c);
                    total += 1;
                }
            }
            let acc = 100.0 * hit as f64 / total as f64;
            if acc <= 100.0 / info.classes as f64 {
                return Err(Error::Corpus(format!(
                    "domain {} ({}) lost the class signal: nearest-mean accuracy {acc:.1}%",
                    d, info.domain_names[d]
                )));
            }
            out.push(acc);
        }
        Ok(out)
    }

    fn relative_path(&self, id: usize) -> PathBuf {
        let (c, d, k) = self.info.locate(id);
        PathBuf::from(format!("d{d:02}")).join(format!("c{c:03}")).join(format!("{k:04}.ppm"))
    }

    /// One binary pixmap per image plus `index.json`.
    pub fn save(&self, dir: &Path, spec: Option<&CorpusSpec>) -> Result<()> {
        let side = self.info.image_size as u32;
        let mut files = Vec::with_capacity(self.info.sample_count());
        for id in 0..self.info.sample_count() {
            let rel = self.relative_path(id);
            let path = dir.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            image::save_buffer_with_format(
                &path,
                self.image(id),
                side,
                side,
                image::ColorType::Rgb8,
                image::ImageFormat::Pnm,
            )?;
            files.push(rel.to_string_lossy().replace('\\', "/"));
        }
        let index = IndexFile {
            info: self.info.clone(),
            spec: spec.cloned(),
            self_check: self.self_check.clone(),
            files,
        };
        fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
        let index: IndexFile = serde_json::from_str(&text)?;
        let info = index.info;
        if index.files.len() != info.sample_count() {
            return Err(Error::Corpus(format!(
                "index lists {} files, dimensions imply {}",
                index.files.len(),
                info.sample_count()
            )));
        }
        let mut pixels = Vec::with_capacity(info.sample_count() * info.image_len());
        for rel in &index.files {
            let img = image::open(dir.join(rel))?.to_rgb8();
            if img.width() as usize != info.image_size || img.height() as usize != info.image_size {
                return Err(Error::Corpus(format!("{rel} is {}×{}", img.width(), img.height())));
            }
            pixels.extend_from_slice(img.as_raw());
        }
        let mut corpus = Self::from_parts(info, pixels)?;
        corpus.self_check = index.self_check;
        Ok(corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusSpec {
        CorpusSpec {
            classes: 4,
            per_pair: 6,
            image_size: 12,
            domains: vec![
                DomainTransform::Identity,
                DomainTransform::GaussianNoise { sigma: 0.05 },
                DomainTransform::Pixelate { block: 2 },
            ],
            seed,
        }
    }

    #[test]
    fn standard_domain_lists() {
        assert_eq!(standard_domains(5).unwrap(), CorpusSpec::desk(0).domains);
        let long = standard_domains(16).unwrap();
        for (i, a) in long.iter().enumerate() {
            assert!(long[i + 1..].iter().all(|b| b != a), "{a:?} repeats");
        }
        assert!(standard_domains(17).is_err());
        assert!(standard_domains(0).is_err());
        assert_eq!(standard_domains(1).unwrap(), vec![DomainTransform::Identity]);
        assert!(CorpusSpec::with_shape(0, 5, 4, 16, 0).is_err());
    }

    #[test]
    fn identity_returns_the_base_image() {
        let base = render_base(3, 1, 0, 16);
        assert_eq!(DomainTransform::Identity.apply(&base, 16), base);
    }

    #[test]
    fn transforms_are_deterministic_and_shape_preserving() {
        let base = render_base(5, 2, 1, 16);
        for t in [
            DomainTransform::GaussianNoise { sigma: 0.1 },
            DomainTransform::BoxBlur { radius: 1 },
            DomainTransform::Contrast { factor: 0.5 },
            DomainTransform::Rotation { degrees: 15.0 },
            DomainTransform::Pixelate { block: 4 },
        ] {
            let a = t.apply(&base, 16);
            assert_eq!(a.len(), base.len());
            assert_eq!(a, t.apply(&base, 16), "{}", t.name());
            assert_ne!(a, base, "{}", t.name());
        }
    }

    #[test]
    fn simple_transform_values() {
        // 2×2 image, one channel pattern replicated over RGB.
        let base: Vec<u8> = [0u8, 100, 200, 100].iter().flat_map(|&v| [v; 3]).collect();
        let c = DomainTransform::Contrast { factor: 0.0 }.apply(&base, 2);
        assert!(c.iter().all(|&v| v == 100));
        let p = DomainTransform::Pixelate { block: 2 }.apply(&base, 2);
        assert!(p.iter().all(|&v| v == 100));
        let b = DomainTransform::BoxBlur { radius: 5 }.apply(&base, 2);
        assert_eq!(b, p);
        let r = DomainTransform::Rotation { degrees: 0.0 }.apply(&base, 2);
        assert_eq!(r, base);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_corpus(&small(9)).unwrap();
        assert_eq!(a, generate_corpus(&small(9)).unwrap());
        assert_ne!(a.pixels(), generate_corpus(&small(10)).unwrap().pixels());
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(generate_corpus(&CorpusSpec { classes: 0, ..small(1) }).is_err());
        assert!(generate_corpus(&CorpusSpec { domains: vec![], ..small(1) }).is_err());
    }

    #[test]
    fn sample_ids_round_trip() {
        let info = generate_corpus(&small(1)).unwrap().info;
        for id in 0..info.sample_count() {
            let (c, d, k) = info.locate(id);
            assert_eq!(info.sample_id(c, d, k), id);
        }
    }

    #[test]
    fn pixel_prototypes_beat_chance_by_a_margin() {
        let spec = CorpusSpec {
            classes: 10,
            per_pair: 20,
            image_size: 32,
            domains: vec![
                DomainTransform::Identity,
                DomainTransform::GaussianNoise { sigma: 0.1 },
                DomainTransform::BoxBlur { radius: 1 },
                DomainTransform::Rotation { degrees: 20.0 },
            ],
            seed: 4,
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.self_check.len(), 4);
        for &acc in &corpus.self_check {
            assert!(acc > 30.0, "{:?}", corpus.self_check);
        }
    }

    #[test]
    fn disk_round_trip() {
        let spec = small(2);
        let corpus = generate_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path(), Some(&spec)).unwrap();
        assert!(dir.path().join("d02/c003/0005.ppm").exists());
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, corpus);
    }
}

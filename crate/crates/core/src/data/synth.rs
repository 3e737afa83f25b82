//! Procedural corpus: images rendered from a few controllable statistics,
//! comments keyed to those statistics, and a luminance-driven mos.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::manifest::{to_jsonl, ManifestRecord, NUM_STYLES};
use super::pipeline::{derive_rng, STREAM_SYNTH};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::prompts::PromptBank;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub image_size: usize,
    pub channels: usize,
    pub min_comments: usize,
    pub max_comments: usize,
    /// Half-width of the uniform noise added to the mos.
    pub mos_noise: f64,
    /// Resample until no two images share a comment.
    pub unique_comments: bool,
    /// Probability of a second style label.
    pub second_style: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            count: 512,
            image_size: 40,
            channels: 3,
            min_comments: 3,
            max_comments: 5,
            mos_noise: 0.25,
            unique_comments: false,
            second_style: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.count == 0 {
            return bad("count must be positive");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        if self.min_comments == 0 || self.min_comments > self.max_comments {
            return bad("need 1 <= min_comments <= max_comments");
        }
        if !(0.0..=4.5).contains(&self.mos_noise) {
            return bad("mos_noise must be in [0, 4.5]");
        }
        if !(0.0..=1.0).contains(&self.second_style) {
            return bad("second_style must be a probability");
        }
        Ok(())
    }
}

/// Declared mos: `1 + 9 * luminance`, plus noise, clamped to [1, 10].
pub fn mos_from_luminance(lum: f64, noise: f64) -> f64 {
    (1.0 + 9.0 * lum + noise).clamp(1.0, 10.0)
}

const HUES: [(&str, [f64; 3]); 6] = [
    ("red", [0.12, -0.06, -0.06]),
    ("orange", [0.10, 0.02, -0.12]),
    ("yellow", [0.06, 0.06, -0.12]),
    ("green", [-0.06, 0.12, -0.06]),
    ("blue", [-0.06, -0.06, 0.12]),
    ("purple", [0.06, -0.12, 0.06]),
];

/// Latent attributes of one rendered image.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthAttributes {
    pub brightness: f64,
    pub contrast: f64,
    pub frequency: usize,
    pub hue: usize,
    pub styles: Vec<u8>,
}

fn sample_attributes(rng: &mut ChaCha8Rng, second_style: f64) -> SynthAttributes {
    let primary = rng.random_range(0..NUM_STYLES);
    let mut styles = vec![primary];
    if rng.random_bool(second_style) {
        let other = rng.random_range(0..NUM_STYLES - 1);
        styles.push(if other >= primary { other + 1 } else { other });
    }
    SynthAttributes {
        brightness: rng.random_range(0.08..0.92),
        contrast: rng.random_range(0.04..0.30),
        frequency: rng.random_range(1..=6),
        hue: rng.random_range(0..HUES.len()),
        styles,
    }
}

/// Pattern value in [-1, 1] for `style` at normalized coordinates (u, v).
fn pattern(style: u8, u: f64, v: f64, f: f64, noise: f64) -> f64 {
    let (cu, cv) = (u - 0.5, v - 0.5);
    let r = (cu * cu + cv * cv).sqrt();
    let step = |b: bool| if b { 1.0 } else { -1.0 };
    match style {
        0 => step(u < 0.5),                        // two complementary halves
        1 => step((2.0 * PI * f * u).sin() > 0.0), // duotone bands
        2 => step(((f + 2.0) * u).floor() as i64 % 2 == ((f + 2.0) * v).floor() as i64 % 2), // hard checker
        3 => noise,                                // grain
        4 => step(r > 0.18),                       // dark subject on light field
        5 => (2.0 * PI * f * v).sin(),             // streaks
        6 => step(r < 0.38),                       // large central disk
        7 => (PI * f * (u + v)).sin(),             // diagonal smear
        8 => -(2.0 * PI * f * r).cos(),            // inverted rings
        9 => step(((u - 0.33).powi(2) + (v - 0.33).powi(2)).sqrt() < 0.12), // blob on a third
        10 => {
            if r < 0.2 {
                step(((f + 4.0) * u).floor() as i64 % 2 == ((f + 4.0) * v).floor() as i64 % 2)
            } else {
                0.0
            }
        }
        11 => step(v < 0.55 + 0.1 * (2.0 * PI * f * u).sin()), // bright sky, dark ground
        12 => 1.0 - 4.0 * r,                                   // soft radial falloff
        _ => step((f * 2.0 * cv.atan2(cu)).sin() > 0.0),       // rays from the center
    }
}

fn render(a: &SynthAttributes, size: usize, channels: usize, rng: &mut ChaCha8Rng) -> Image {
    let tint = HUES[a.hue].1;
    let style = a.styles[0];
    let f = a.frequency as f64;
    let mut data = Vec::with_capacity(size * size * channels);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let noise = rng.random_range(-1.0..1.0);
            let p = pattern(style, u, v, f, noise);
            // complementary halves swap the tint sign
            let sign = if style == 0 && u >= 0.5 { -1.0 } else { 1.0 };
            for c in 0..channels {
                let t = tint.get(c).filter(|_| channels == 3).map_or(0.0, |&t| sign * t);
                let val = (a.brightness + a.contrast * p + t).clamp(0.0, 1.0);
                data.push((val * 255.0).round() as u8);
            }
        }
    }
    Image::new(size, size, channels, data).expect("rendered dimensions are consistent")
}

/// Fraction of horizontally adjacent pixel pairs differing by more than 8
/// levels in the first channel.
pub fn edge_density(img: &Image) -> f64 {
    let mut edges = 0usize;
    for y in 0..img.height {
        for x in 1..img.width {
            if (img.at(y, x, 0) as i32 - img.at(y, x - 1, 0) as i32).abs() > 8 {
                edges += 1;
            }
        }
    }
    edges as f64 / (img.height * (img.width - 1)) as f64
}

/// Standard deviation of intensities, in [0, 0.5].
pub fn rms_contrast(img: &Image) -> f64 {
    let n = img.data.len() as f64;
    let m = img.mean_luminance();
    (img.data.iter().map(|&v| (v as f64 / 255.0 - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn lighting_phrase(lum: f64, rng: &mut ChaCha8Rng) -> &'static str {
    if lum > 0.62 {
        pick(rng, &["good lighting", "great light", "nicely bright", "well exposed"])
    } else if lum > 0.38 {
        pick(rng, &["decent lighting", "average light", "fair exposure"])
    } else {
        pick(rng, &["bad lighting", "too dark", "underexposed", "poor light"])
    }
}

fn verdict_phrase(lum: f64, rng: &mut ChaCha8Rng) -> &'static str {
    if lum > 0.6 {
        pick(rng, &["good image", "beautiful shot", "love this photo"])
    } else if lum > 0.4 {
        pick(rng, &["okay image", "not bad"])
    } else {
        pick(rng, &["bad image", "boring shot", "not my taste"])
    }
}

fn contrast_phrase(contrast: f64, rng: &mut ChaCha8Rng) -> &'static str {
    if contrast > 0.12 {
        pick(rng, &["strong contrast", "punchy tones"])
    } else {
        pick(rng, &["soft contrast", "muted tones"])
    }
}

fn comment(lum: f64, a: &SynthAttributes, bank: &PromptBank, rng: &mut ChaCha8Rng) -> String {
    let hue = HUES[a.hue].0;
    let style = &bank.styles[a.styles[rng.random_range(0..a.styles.len())] as usize];
    let style_phrase = if rng.random_bool(0.3) {
        style.single.clone()
    } else {
        style.prompts[rng.random_range(0..style.prompts.len())].clone()
    };
    let mut parts: Vec<String> = vec![lighting_phrase(lum, rng).into(), verdict_phrase(lum, rng).into()];
    match rng.random_range(0..3) {
        0 => parts.push(contrast_phrase(a.contrast, rng).into()),
        1 => parts.push(format!("lovely {hue} tones")),
        _ => parts.push(style_phrase),
    }
    // shuffle phrase order
    let n = parts.len();
    for i in (1..n).rev() {
        parts.swap(i, rng.random_range(0..=i));
    }
    parts.join(", ")
}

/// One generated record with its rendered image and measured statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub record: ManifestRecord,
    pub image: Image,
    pub attributes: SynthAttributes,
    pub luminance: f64,
}

/// Renders the corpus in memory. Image paths are `images/<id>.rimg`.
pub fn synthesize(spec: &SynthSpec, seed: u64, bank: &PromptBank) -> Result<Vec<SynthItem>> {
    spec.validate()?;
    if bank.styles.len() != NUM_STYLES as usize {
        return Err(Error::Config(format!(
            "prompt bank has {} styles, synthetic labels need {NUM_STYLES}",
            bank.styles.len()
        )));
    }
    let mut used = HashSet::new();
    let mut items = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = derive_rng(seed, &[STREAM_SYNTH, i as u64]);
        let attributes = sample_attributes(&mut rng, spec.second_style);
        let image = render(&attributes, spec.image_size, spec.channels, &mut rng);
        let luminance = image.mean_luminance();
        let k = rng.random_range(spec.min_comments..=spec.max_comments);
        let mut comments: Vec<String> = Vec::with_capacity(k);
        let mut attempts = 0;
        while comments.len() < k {
            let c = comment(luminance, &attributes, bank, &mut rng);
            attempts += 1;
            let fresh = !comments.contains(&c) && (!spec.unique_comments || !used.contains(&c));
            if fresh {
                comments.push(c);
            } else if attempts > 1000 {
                return Err(Error::Config(format!(
                    "could not find {k} distinct comments for image {i}; lower the comment count"
                )));
            }
        }
        if spec.unique_comments {
            used.extend(comments.iter().cloned());
        }
        let noise = if spec.mos_noise > 0.0 {
            rng.random_range(-spec.mos_noise..=spec.mos_noise)
        } else {
            0.0
        };
        let id = format!("synth-{i:05}");
        let record = ManifestRecord {
            image: PathBuf::from(format!("images/{id}.rimg")),
            id,
            comments,
            mos: Some(mos_from_luminance(luminance, noise)),
            styles: Some(attributes.styles.clone()),
        };
        items.push(SynthItem {
            record,
            image,
            attributes,
            luminance,
        });
    }
    Ok(items)
}

/// Writes `images/*.rimg` and `manifest.jsonl` under `out`; returns the
/// manifest path.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64, bank: &PromptBank, out: &Path) -> Result<PathBuf> {
    let items = synthesize(spec, seed, bank)?;
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for it in &items {
        write_atomic(&out.join(&it.record.image), &it.image.to_rimg())?;
    }
    let records: Vec<ManifestRecord> = items.into_iter().map(|it| it.record).collect();
    let manifest = out.join(MANIFEST_NAME);
    write_atomic(&manifest, to_jsonl(&records).as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::srcc;

    fn small(count: usize) -> SynthSpec {
        SynthSpec {
            count,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_mos_is_monotone_in_luminance() {
        let spec = SynthSpec {
            mos_noise: 0.0,
            ..small(60)
        };
        let items = synthesize(&spec, 3, &PromptBank::default()).unwrap();
        let lum: Vec<f64> = items.iter().map(|i| i.luminance).collect();
        let mos: Vec<f64> = items.iter().map(|i| i.record.mos.unwrap()).collect();
        assert_eq!(srcc(&lum, &mos).unwrap(), 1.0);
    }

    #[test]
    fn seeds_and_schema() {
        let bank = PromptBank::default();
        let a = synthesize(&small(8), 1, &bank).unwrap();
        let b = synthesize(&small(8), 2, &bank).unwrap();
        assert_ne!(a[0].image, b[0].image);
        for it in a.iter().chain(&b) {
            let r = &it.record;
            assert!((3..=5).contains(&r.comments.len()));
            assert!(r.styles.as_ref().unwrap().iter().all(|&s| s < NUM_STYLES));
            assert_eq!((it.image.width, it.image.height, it.image.channels), (40, 40, 3));
        }
        assert_eq!(a, synthesize(&small(8), 1, &bank).unwrap());
    }

    #[test]
    fn unique_comments_across_images() {
        let spec = SynthSpec {
            min_comments: 1,
            max_comments: 1,
            unique_comments: true,
            ..small(32)
        };
        let items = synthesize(&spec, 5, &PromptBank::default()).unwrap();
        let set: HashSet<&String> = items.iter().map(|i| &i.record.comments[0]).collect();
        assert_eq!(set.len(), 32);
    }

    #[test]
    fn invalid_spec_rejected() {
        let bank = PromptBank::default();
        assert!(synthesize(&small(0), 1, &bank).is_err());
        let s = SynthSpec {
            min_comments: 4,
            max_comments: 2,
            ..small(2)
        };
        assert!(synthesize(&s, 1, &bank).is_err());
    }

    #[test]
    fn statistics_track_attributes() {
        let items = synthesize(&small(40), 9, &PromptBank::default()).unwrap();
        let b: Vec<f64> = items.iter().map(|i| i.attributes.brightness).collect();
        let l: Vec<f64> = items.iter().map(|i| i.luminance).collect();
        assert!(srcc(&b, &l).unwrap() > 0.9);
        assert!(items.iter().all(|i| (0.0..=1.0).contains(&edge_density(&i.image))));
        assert!(items.iter().all(|i| rms_contrast(&i.image) <= 0.5));
    }
}

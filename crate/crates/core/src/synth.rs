//! Synthetic camouflaged-object clips: a static band-limited `1/f^alpha`
//! texture background and a jittered blob translating rigidly across it,
//! textured with the same field sampled at an offset.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::freq::fft2_plane;
use crate::io::{read_pgm, read_ppm, write_pgm, write_ppm};
use crate::tensor::Tensor;

const TEXTURE_STD: f64 = 0.15;
const HARMONICS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Spectral exponent of the texture's power spectrum.
    pub alpha: f64,
    /// Frequencies below this many cycles per image are removed.
    pub low_cut: f64,
    pub radius: f64,
    /// Relative amplitude of the boundary harmonics.
    pub jitter: f64,
    /// `(x, y)` pixels per frame.
    pub velocity: (f64, f64),
    /// `(x, y)` of the shape's anchor at frame 0.
    pub start: (f64, f64),
    pub camouflage: f64,
}

impl ClipSpec {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv: [(&str, String); 13] = [
            ("seed", self.seed.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("frames", self.frames.to_string()),
            ("alpha", self.alpha.to_string()),
            ("low_cut", self.low_cut.to_string()),
            ("radius", self.radius.to_string()),
            ("jitter", self.jitter.to_string()),
            ("velocity_x", self.velocity.0.to_string()),
            ("velocity_y", self.velocity.1.to_string()),
            ("start_x", self.start.0.to_string()),
            ("start_y", self.start.1.to_string()),
            ("camouflage", self.camouflage.to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |k: &str| {
            map.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Data(format!("clip spec lacks `{k}`")))
        };
        let f =
            |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Data(format!("bad `{k}` in clip spec"))) };
        let u =
            |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Data(format!("bad `{k}` in clip spec"))) };
        Ok(Self {
            seed: get("seed")?.parse().map_err(|_| Error::Data("bad `seed` in clip spec".into()))?,
            height: u("height")?,
            width: u("width")?,
            frames: u("frames")?,
            alpha: f("alpha")?,
            low_cut: f("low_cut")?,
            radius: f("radius")?,
            jitter: f("jitter")?,
            velocity: (f("velocity_x")?, f("velocity_y")?),
            start: (f("start_x")?, f("start_y")?),
            camouflage: f("camouflage")?,
        })
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{l}`")))
        })
        .collect()
}

#[derive(Clone)]
pub struct VideoClip {
    pub spec: ClipSpec,
    /// `[N, 3, H, W]` in `[0, 1]`, on the 8-bit grid.
    pub frames: Tensor,
    /// `[N, 1, H, W]` binary.
    pub masks: Tensor,
}

/// Zero-mean, unit-variance periodic Gaussian field with power spectrum
/// `f^-alpha` above `low_cut` cycles per image.
pub fn texture_field(rng: &mut impl Rng, h: usize, w: usize, alpha: f64, low_cut: f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> =
        (0..h * w).map(|_| Complex::new(StandardNormal.sample(rng), StandardNormal.sample(rng))).collect();
    let signed = |k: usize, n: usize| if 2 * k > n { k as f64 - n as f64 } else { k as f64 };
    for u in 0..h {
        for v in 0..w {
            let f = signed(u, h).hypot(signed(v, w));
            let amp = if f < low_cut.max(1e-9) { 0.0 } else { f.powf(-alpha / 2.0) };
            buf[u * w + v] *= amp;
        }
    }
    fft2_plane(&mut buf, h, w, true);
    let vals: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    vals.iter().map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }).collect()
}

/// Star-shaped blob: boundary radius as a function of angle.
struct Shape {
    radius: f64,
    harmonics: [(f64, f64); HARMONICS],
}

impl Shape {
    fn new(rng: &mut impl Rng, radius: f64, jitter: f64) -> Self {
        let mut harmonics = [(0.0, 0.0); HARMONICS];
        let raw: Vec<f64> = (0..HARMONICS).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum::<f64>().max(1e-12);
        for (h, r) in harmonics.iter_mut().zip(&raw) {
            *h = (jitter * r / total, rng.random::<f64>() * 2.0 * PI);
        }
        Self { radius, harmonics }
    }

    fn contains(&self, dy: f64, dx: f64) -> bool {
        let theta = dy.atan2(dx);
        let bump: f64 =
            self.harmonics.iter().enumerate().map(|(k, &(a, phi))| a * ((k as f64 + 2.0) * theta + phi).cos()).sum();
        dy.hypot(dx) <= self.radius * (1.0 + bump)
    }

    /// Offsets `(dy, dx)` inside the shape.
    fn support(&self, jitter: f64) -> Vec<(isize, isize)> {
        let reach = (self.radius * (1.0 + jitter)).ceil() as isize + 1;
        let mut out = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                if self.contains(dy as f64, dx as f64) {
                    out.push((dy, dx));
                }
            }
        }
        out
    }
}

fn anchor(spec: &ClipSpec, t: usize) -> (isize, isize) {
    let y = spec.start.1 + t as f64 * spec.velocity.1;
    let x = spec.start.0 + t as f64 * spec.velocity.0;
    (y.round() as isize, x.round() as isize)
}

pub fn generate_clip(spec: &ClipSpec) -> Result<VideoClip> {
    let (h, w, n) = (spec.height, spec.width, spec.frames);
    if h == 0 || w == 0 || n == 0 {
        return Err(Error::Config(format!("empty clip {n}x{h}x{w}")));
    }
    if !(0.0..=1.0).contains(&spec.camouflage) {
        return Err(Error::Config(format!("camouflage {} outside [0, 1]", spec.camouflage)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = Shape::new(&mut rng, spec.radius, spec.jitter);
    let support = shape.support(spec.jitter);
    if support.is_empty() {
        return Err(Error::Config(format!("radius {} gives an empty object", spec.radius)));
    }
    for t in 0..n {
        let (ay, ax) = anchor(spec, t);
        for &(dy, dx) in &support {
            let (y, x) = (ay + dy, ax + dx);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                return Err(Error::ObjectOutOfFrame(format!("frame {t}: pixel ({y}, {x}) outside {h}x{w}")));
            }
        }
    }

    // luminance shared by the channels plus per-channel chroma
    let lum = texture_field(&mut rng, h, w, spec.alpha, spec.low_cut);
    let chroma: Vec<Vec<f64>> = (0..3).map(|_| texture_field(&mut rng, h, w, spec.alpha, spec.low_cut)).collect();
    let tex = |c: usize, y: usize, x: usize| {
        let i = y * w + x;
        (0.5 + TEXTURE_STD * (0.8 * lum[i] + 0.6 * chroma[c][i])).clamp(0.0, 1.0)
    };
    let offset = (rng.random_range(h / 4..=3 * h / 4), rng.random_range(w / 4..=3 * w / 4));
    let color: [f64; 3] = std::array::from_fn(|_| {
        let d = rng.random_range(0.25..0.4);
        if rng.random::<bool>() {
            0.5 + d
        } else {
            0.5 - d
        }
    });

    let lam = spec.camouflage;
    let plane = h * w;
    let mut frames = vec![0.0; n * 3 * plane];
    let mut masks = vec![0.0; n * plane];
    for t in 0..n {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    frames[(t * 3 + c) * plane + y * w + x] = tex(c, y, x);
                }
            }
        }
        let (ay, ax) = anchor(spec, t);
        for &(dy, dx) in &support {
            let (y, x) = ((ay + dy) as usize, (ax + dx) as usize);
            masks[t * plane + y * w + x] = 1.0;
            // object texture moves with the object
            let sy = (dy + offset.0 as isize).rem_euclid(h as isize) as usize;
            let sx = (dx + offset.1 as isize).rem_euclid(w as isize) as usize;
            for (c, col) in color.iter().enumerate() {
                frames[(t * 3 + c) * plane + y * w + x] = lam * tex(c, sy, sx) + (1.0 - lam) * col;
            }
        }
    }
    for v in &mut frames {
        *v = f64::from(crate::io::quantize(*v)) / 255.0;
    }
    Ok(VideoClip {
        spec: spec.clone(),
        frames: Tensor::new(frames, &[n, 3, h, w])?,
        masks: Tensor::new(masks, &[n, 1, h, w])?,
    })
}

/// Ranges from which [`make_dataset`] draws each clip.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub clips: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub camouflage: f64,
    pub alpha: f64,
    pub low_cut: f64,
    pub radius: (f64, f64),
    pub speed: (f64, f64),
    pub jitter: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            clips: 40,
            height: 64,
            width: 64,
            frames: 5,
            camouflage: 0.9,
            alpha: 2.0,
            low_cut: 4.0,
            radius: (9.0, 14.0),
            speed: (1.0, 3.0),
            jitter: 0.15,
        }
    }
}

pub struct Dataset {
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
}

pub fn split_sizes(n: usize) -> (usize, usize) {
    let train = (n * 4 / 5).clamp(1, n.saturating_sub(1).max(1));
    (train, n - train)
}

/// Per-clip specs; clip `i` gets seed `seed * 2^20 + i`, so seeds never
/// repeat within a dataset.
pub fn clip_specs(spec: &DatasetSpec, seed: u64) -> Result<Vec<ClipSpec>> {
    if spec.clips < 2 {
        return Err(Error::Config(format!("a dataset needs at least 2 clips, got {}", spec.clips)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, n) = (spec.height as f64, spec.width as f64, spec.frames);
    (0..spec.clips)
        .map(|i| {
            let radius = rng.random_range(spec.radius.0..=spec.radius.1);
            let speed = rng.random_range(spec.speed.0..=spec.speed.1);
            let heading = rng.random::<f64>() * 2.0 * PI;
            let velocity = (speed * heading.cos(), speed * heading.sin());
            let reach = (radius * (1.0 + spec.jitter)).ceil() + 1.0;
            let travel = |v: f64| (n.saturating_sub(1)) as f64 * v;
            let range = |side: f64, v: f64| {
                let lo = reach - travel(v).min(0.0);
                let hi = side - 1.0 - reach - travel(v).max(0.0);
                (lo <= hi).then_some((lo, hi))
            };
            let (Some(rx), Some(ry)) = (range(w, velocity.0), range(h, velocity.1)) else {
                return Err(Error::ObjectOutOfFrame(format!(
                    "radius {radius:.1} moving {speed:.1} px/frame does not fit {h}x{w}"
                )));
            };
            let start = (rng.random_range(rx.0..=rx.1), rng.random_range(ry.0..=ry.1));
            Ok(ClipSpec {
                seed: seed.wrapping_shl(20).wrapping_add(i as u64),
                height: spec.height,
                width: spec.width,
                frames: spec.frames,
                alpha: spec.alpha,
                low_cut: spec.low_cut,
                radius,
                jitter: spec.jitter,
                velocity,
                start,
                camouflage: spec.camouflage,
            })
        })
        .collect()
}

pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let clips = clip_specs(spec, seed)?.iter().map(generate_clip).collect::<Result<Vec<_>>>()?;
    let (n_train, _) = split_sizes(clips.len());
    let mut clips = clips;
    let val = clips.split_off(n_train);
    Ok(Dataset { train: clips, val })
}

pub fn save_clip(clip: &VideoClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let s = &clip.spec;
    let (h, w, plane) = (s.height, s.width, s.height * s.width);
    for t in 0..s.frames {
        write_ppm(
            dir.join(format!("frame_{t:03}.ppm")),
            &clip.frames.data()[t * 3 * plane..(t + 1) * 3 * plane],
            h,
            w,
        )?;
        write_pgm(dir.join(format!("mask_{t:03}.pgm")), &clip.masks.data()[t * plane..(t + 1) * plane], h, w)?;
    }
    fs::write(dir.join("spec.txt"), s.to_text())?;
    Ok(())
}

pub fn load_clip(dir: impl AsRef<Path>) -> Result<VideoClip> {
    let dir = dir.as_ref();
    let spec = ClipSpec::from_text(&fs::read_to_string(dir.join("spec.txt"))?)?;
    let (h, w, n) = (spec.height, spec.width, spec.frames);
    let mut frames = Vec::with_capacity(n * 3 * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    for t in 0..n {
        let (f, fh, fw) = read_ppm(dir.join(format!("frame_{t:03}.ppm")))?;
        let (m, mh, mw) = read_pgm(dir.join(format!("mask_{t:03}.pgm")))?;
        if (fh, fw, mh, mw) != (h, w, h, w) {
            return Err(Error::Data(format!("{}: frame {t} is not {h}x{w}", dir.display())));
        }
        frames.extend(f);
        masks.extend(m.into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }));
    }
    Ok(VideoClip { spec, frames: Tensor::new(frames, &[n, 3, h, w])?, masks: Tensor::new(masks, &[n, 1, h, w])? })
}

/// Writes `train/clip_XXXX` and `val/clip_XXXX` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (split, clips) in [("train", &ds.train), ("val", &ds.val)] {
        for (i, c) in clips.iter().enumerate() {
            save_clip(c, dir.join(split).join(format!("clip_{i:04}")))?;
        }
    }
    Ok(())
}

fn load_split(dir: &Path) -> Result<Vec<VideoClip>> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.join("spec.txt").is_file())
        .collect();
    entries.sort();
    entries.iter().map(load_clip).collect()
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let ds = Dataset { train: load_split(&dir.join("train"))?, val: load_split(&dir.join("val"))? };
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::Data(format!("{}: needs nonempty train/ and val/ splits", dir.display())));
    }
    Ok(ds)
}

/// Mean of `frames` over the masked (or unmasked) pixels of all channels.
pub fn masked_mean(clip: &VideoClip, foreground: bool) -> f64 {
    let s = &clip.spec;
    let plane = s.height * s.width;
    let (mut sum, mut count) = (0.0, 0usize);
    for t in 0..s.frames {
        for i in 0..plane {
            if (clip.masks.data()[t * plane + i] > 0.5) == foreground {
                for c in 0..3 {
                    sum += clip.frames.data()[(t * 3 + c) * plane + i];
                }
                count += 3;
            }
        }
    }
    sum / count.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(velocity: (f64, f64)) -> ClipSpec {
        ClipSpec {
            seed: 11,
            height: 48,
            width: 48,
            frames: 5,
            alpha: 2.0,
            low_cut: 4.0,
            radius: 8.0,
            jitter: 0.15,
            velocity,
            start: (16.0, 20.0),
            camouflage: 0.9,
        }
    }

    fn centroids(clip: &VideoClip) -> Vec<(f64, f64)> {
        let s = &clip.spec;
        let plane = s.height * s.width;
        (0..s.frames)
            .map(|t| {
                let m = &clip.masks.data()[t * plane..(t + 1) * plane];
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for (i, &v) in m.iter().enumerate() {
                    sx += v * (i % s.width) as f64;
                    sy += v * (i / s.width) as f64;
                    n += v;
                }
                (sx / n, sy / n)
            })
            .collect()
    }

    #[test]
    fn static_object_has_identical_masks() {
        let c = generate_clip(&spec((0.0, 0.0))).unwrap();
        let plane = 48 * 48;
        for t in 1..5 {
            assert_eq!(c.masks.data()[..plane], c.masks.data()[t * plane..(t + 1) * plane]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_clip(&spec((1.5, -0.5))).unwrap();
        let b = generate_clip(&spec((1.5, -0.5))).unwrap();
        assert_eq!(a.frames.data(), b.frames.data());
        assert_eq!(a.masks.data(), b.masks.data());
        let c = generate_clip(&ClipSpec { seed: 12, ..spec((1.5, -0.5)) }).unwrap();
        assert_ne!(a.frames.data(), c.frames.data());
    }

    #[test]
    fn centroid_advances_by_velocity() {
        let c = generate_clip(&spec((2.0, 0.0))).unwrap();
        let cs = centroids(&c);
        for pair in cs.windows(2) {
            assert!((pair[1].0 - pair[0].0 - 2.0).abs() <= 0.1);
            assert!((pair[1].1 - pair[0].1).abs() <= 0.1);
        }
        let plane = 48 * 48;
        let area = |t: usize| c.masks.data()[t * plane..(t + 1) * plane].iter().sum::<f64>();
        assert!((1..5).all(|t| area(t) == area(0)));
    }

    #[test]
    fn leaving_the_frame_is_an_error() {
        let s = ClipSpec { start: (40.0, 20.0), ..spec((3.0, 0.0)) };
        assert!(matches!(generate_clip(&s), Err(Error::ObjectOutOfFrame(_))));
    }

    #[test]
    fn texture_is_normalized_and_band_limited() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = texture_field(&mut rng, 32, 32, 2.0, 4.0);
        let mean = t.iter().sum::<f64>() / 1024.0;
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1024.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        let spec = crate::freq::fft2_centered(&Tensor::new(t, &[32, 32]).unwrap()).unwrap();
        assert!(crate::freq::band_energy(&spec, 0.0, 3.0).unwrap() < 1e-16);
    }

    #[test]
    fn dataset_split_and_seeds() {
        let ds_spec = DatasetSpec { clips: 10, height: 48, width: 48, ..DatasetSpec::default() };
        let specs = clip_specs(&ds_spec, 3).unwrap();
        let mut seeds: Vec<u64> = specs.iter().map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 10);
        let ds = make_dataset(&ds_spec, 3).unwrap();
        assert_eq!((ds.train.len(), ds.val.len()), (8, 2));
        for clip in ds.train.iter().chain(&ds.val) {
            let plane = 48 * 48;
            for t in 0..clip.spec.frames {
                assert!(clip.masks.data()[t * plane..(t + 1) * plane].contains(&1.0));
            }
        }
        assert_eq!(split_sizes(2), (1, 1));
        assert!(clip_specs(&DatasetSpec { clips: 1, ..ds_spec }, 0).is_err());
    }

    #[test]
    fn persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_clip(&spec((1.0, 1.0))).unwrap();
        save_clip(&c, dir.path().join("c")).unwrap();
        let back = load_clip(dir.path().join("c")).unwrap();
        assert_eq!(back.spec, c.spec);
        assert_eq!(back.frames.data(), c.frames.data());
        assert_eq!(back.masks.data(), c.masks.data());
    }

    #[test]
    fn full_camouflage_hides_the_mean() {
        let ds_spec = DatasetSpec { clips: 100, camouflage: 1.0, ..DatasetSpec::default() };
        let specs = clip_specs(&ds_spec, 9).unwrap();
        let gap: f64 = specs
            .iter()
            .map(|s| {
                let c = generate_clip(s).unwrap();
                (masked_mean(&c, true) - masked_mean(&c, false)).abs()
            })
            .sum::<f64>()
            / specs.len() as f64;
        assert!(gap < 0.02, "{gap}");
    }
}

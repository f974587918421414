//! Class-conditioned synthetic datasets for every modality, plus the paired
//! anchor images and captions. Generation is a pure function of
//! (config, seed): every random draw comes from a labeled substream keyed by
//! the sample's global index, so datasets are bit-reproducible and samples
//! could be generated in any order.

use anyhow::{bail, Result};

use omnilens_core::anchors::tokenize_words;
use omnilens_core::array::Array;
use omnilens_core::rng::Rng;
use omnilens_core::tokenize::eeg::EEGSequence;
use omnilens_core::tokenize::grid::{clamp_unit, Grid};
use omnilens_core::tokenize::point::PointCloud;

use crate::config::{Modality, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Payload {
    Points(PointCloud),
    /// Raw mono waveform in [-1, 1].
    Audio(Vec<f64>),
    /// Depth in meters (1 channel) or tactile RGB in [0, 1] (3 channels).
    Grid(Grid),
    Eeg(EEGSequence),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub payload: Payload,
    pub image: Grid,
    pub caption: String,
    pub text_ids: Vec<usize>,
}

pub struct SyntheticDataset {
    pub modality: Modality,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub vocab: Vec<String>,
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn labels(&self, split: Split) -> Vec<usize> {
        self.indices(split).iter().map(|&i| self.samples[i].label).collect()
    }
}

/// Generate the dataset described by `cfg` from `seed`. Samples are laid
/// out split-major, then class-major, then instance, so ids are stable.
pub fn gen_synthetic(cfg: &RunConfig, seed: u64) -> Result<SyntheticDataset> {
    if cfg.data.classes < 2 {
        bail!("need at least 2 classes");
    }
    let class_names = cfg.class_names()?;
    let vocab = cfg.vocab()?;
    let root = Rng::from_seed(seed);
    let mut samples = Vec::new();
    let mut global = 0u64;
    let splits = [
        (Split::Train, cfg.data.train_per_class),
        (Split::Val, cfg.data.val_per_class),
        (Split::Test, cfg.data.test_per_class),
    ];
    for (split, per_class) in splits {
        for class in 0..cfg.data.classes {
            for instance in 0..per_class {
                let payload = gen_payload(cfg, class, root.substream("synth.payload", global))?;
                let image = gen_anchor_image(
                    cfg.teacher_image.image_h,
                    cfg.teacher_image.image_w,
                    class,
                    &mut root.substream("synth.image", global),
                );
                let caption = cfg.train.caption.replace("{}", &class_names[class]);
                let text_ids =
                    tokenize_words(&vocab, &caption).map_err(|e| anyhow::anyhow!("{e}"))?;
                samples.push(Sample {
                    id: format!("{}/{}/{:04}", split.tag(), class_names[class], instance),
                    label: class,
                    split,
                    payload,
                    image,
                    caption,
                    text_ids,
                });
                global += 1;
            }
        }
    }
    Ok(SyntheticDataset {
        modality: cfg.modality,
        classes: cfg.data.classes,
        class_names,
        vocab,
        samples,
    })
}

fn gen_payload(cfg: &RunConfig, class: usize, mut rng: Rng) -> Result<Payload> {
    Ok(match cfg.modality {
        Modality::PointCloud => {
            Payload::Points(gen_cloud(cfg.tokenizer.n_points, class, &mut rng)?)
        }
        Modality::Audio => {
            let samples =
                (cfg.tokenizer.clip_seconds * cfg.tokenizer.sample_rate as f64) as usize;
            Payload::Audio(gen_audio(samples, cfg.tokenizer.sample_rate, class, &mut rng))
        }
        Modality::Depth => Payload::Grid(gen_depth(
            cfg.tokenizer.grid_h,
            cfg.tokenizer.grid_w,
            class,
            &mut rng,
        )),
        Modality::Tactile => Payload::Grid(gen_tactile(
            cfg.tokenizer.grid_h,
            cfg.tokenizer.grid_w,
            class,
            &mut rng,
        )),
        Modality::Eeg => Payload::Eeg(gen_eeg(
            cfg.tokenizer.eeg_channels,
            cfg.tokenizer.eeg_steps,
            class,
            &mut rng,
        )?),
    })
}

/// Parametric surfaces: sphere, cube, cylinder, torus, cone, all roughly
/// unit scale and centered, with light coordinate noise.
pub fn gen_cloud(n: usize, class: usize, rng: &mut Rng) -> Result<PointCloud> {
    let mut data = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let (x, y, z) = match class {
            // Sphere of radius 1: normalized gaussian directions.
            0 => {
                let (mut x, mut y, mut z);
                loop {
                    x = rng.normal_f64();
                    y = rng.normal_f64();
                    z = rng.normal_f64();
                    let r = (x * x + y * y + z * z).sqrt();
                    if r > 1e-9 {
                        x /= r;
                        y /= r;
                        z /= r;
                        break;
                    }
                }
                (x, y, z)
            }
            // Cube surface, side 1.6.
            1 => {
                let face = rng.below(6);
                let u = rng.uniform_range(-0.8, 0.8);
                let v = rng.uniform_range(-0.8, 0.8);
                match face {
                    0 => (0.8, u, v),
                    1 => (-0.8, u, v),
                    2 => (u, 0.8, v),
                    3 => (u, -0.8, v),
                    4 => (u, v, 0.8),
                    _ => (u, v, -0.8),
                }
            }
            // Cylinder shell, radius 0.7, height 1.6.
            2 => {
                let a = rng.uniform_range(0.0, core::f64::consts::TAU);
                let z = rng.uniform_range(-0.8, 0.8);
                (0.7 * a.cos(), 0.7 * a.sin(), z)
            }
            // Torus, major 0.8, minor 0.3.
            3 => {
                let u = rng.uniform_range(0.0, core::f64::consts::TAU);
                let v = rng.uniform_range(0.0, core::f64::consts::TAU);
                let ring = 0.8 + 0.3 * v.cos();
                (ring * u.cos(), ring * u.sin(), 0.3 * v.sin())
            }
            // Cone shell from apex (0,0,0.8) to a base circle of radius 0.8.
            4 => {
                let a = rng.uniform_range(0.0, core::f64::consts::TAU);
                let t = rng.uniform_f64().sqrt();
                (0.8 * t * a.cos(), 0.8 * t * a.sin(), 0.8 - 1.6 * t)
            }
            other => bail!("no point-cloud generator for class {other}"),
        };
        data.push(x + 0.01 * rng.normal_f64());
        data.push(y + 0.01 * rng.normal_f64());
        data.push(z + 0.01 * rng.normal_f64());
    }
    PointCloud::new(Array::from_vec(n, 3, data)?).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Class-specific harmonic stacks over distinct fundamentals, plus a little
/// broadband noise. Fundamentals are spaced so log-mel energy peaks in
/// different bands per class.
pub fn gen_audio(n_samples: usize, sample_rate: u32, class: usize, rng: &mut Rng) -> Vec<f64> {
    // (fundamental Hz, harmonic amplitude profile)
    let profiles: [(f64, [f64; 4]); 5] = [
        (220.0, [1.0, 0.5, 0.25, 0.12]),
        (440.0, [1.0, 0.0, 0.6, 0.0]),
        (880.0, [1.0, 0.2, 0.0, 0.0]),
        (1760.0, [1.0, 0.4, 0.2, 0.1]),
        (3200.0, [1.0, 0.0, 0.0, 0.0]),
    ];
    let (f0, amps) = profiles[class % profiles.len()];
    let f0 = f0 * (1.0 + 0.02 * rng.normal_f64());
    let phases: Vec<f64> =
        (0..4).map(|_| rng.uniform_range(0.0, core::f64::consts::TAU)).collect();
    let mut out = Vec::with_capacity(n_samples);
    let norm: f64 = amps.iter().sum();
    for i in 0..n_samples {
        let t = i as f64 / sample_rate as f64;
        let mut v = 0.0;
        for (h, (&a, &ph)) in amps.iter().zip(&phases).enumerate() {
            v += a * (core::f64::consts::TAU * f0 * (h + 1) as f64 * t + ph).sin();
        }
        v = 0.5 * v / norm + 0.005 * rng.normal_f64();
        out.push(v.clamp(-1.0, 1.0));
    }
    out
}

/// Planar and quadric depth fields in meters, all positive.
pub fn gen_depth(h: usize, w: usize, class: usize, rng: &mut Rng) -> Grid {
    let mut g = Grid::zeros(h, w, 1);
    let tilt_a = rng.uniform_range(-0.6, 0.6);
    let tilt_b = rng.uniform_range(-0.6, 0.6);
    let offset = rng.uniform_range(-0.1, 0.1);
    for r in 0..h {
        for c in 0..w {
            let x = 2.0 * c as f64 / (w - 1).max(1) as f64 - 1.0;
            let y = 2.0 * r as f64 / (h - 1).max(1) as f64 - 1.0;
            let depth = match class {
                0 => 2.0 + tilt_a * x + tilt_b * y,
                1 => 1.0 + 2.0 * (x + 1.0) / 2.0,
                2 => 3.2 - 1.8 * (x * x + y * y).min(1.0),
                3 => 1.2 + 1.8 * x * x,
                _ => 3.0 - 1.8 * x.abs(),
            };
            let v = (depth + offset + 0.02 * rng.normal_f64()).max(0.3);
            *g.at_mut(r, c, 0) = v;
        }
    }
    g
}

/// Procedural textures in [0,1] RGB; the pattern carries the class, the
/// tint is random per sample.
pub fn gen_tactile(h: usize, w: usize, class: usize, rng: &mut Rng) -> Grid {
    let mut g = Grid::zeros(h, w, 3);
    let tint = [
        rng.uniform_range(0.6, 1.0),
        rng.uniform_range(0.6, 1.0),
        rng.uniform_range(0.6, 1.0),
    ];
    let theta = rng.uniform_range(-0.3, 0.3);
    let phase = rng.uniform_range(0.0, core::f64::consts::TAU);
    let freq = rng.uniform_range(0.8, 1.2);
    for r in 0..h {
        for c in 0..w {
            let x = c as f64;
            let y = r as f64;
            let intensity = match class {
                // Smooth radial gradient.
                0 => {
                    let cx = w as f64 / 2.0;
                    let cy = h as f64 / 2.0;
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    1.0 - (d / (w.max(h) as f64)).min(1.0)
                }
                // Oriented stripes.
                1 => {
                    let u = x * theta.cos() + y * theta.sin();
                    0.5 + 0.5 * (freq * u + phase).sin().signum()
                }
                // Dot lattice.
                2 => {
                    let period = 6.0 * freq;
                    let dx = (x % period) - period / 2.0;
                    let dy = (y % period) - period / 2.0;
                    if dx * dx + dy * dy < 4.0 {
                        1.0
                    } else {
                        0.15
                    }
                }
                // Grid lines.
                3 => {
                    let period = (6.0 * freq).max(2.0);
                    if (x % period) < 1.5 || (y % period) < 1.5 {
                        1.0
                    } else {
                        0.15
                    }
                }
                // Rough: broadband noise.
                _ => 0.5 + 0.5 * rng.normal_f64(),
            };
            let v = intensity + 0.02 * rng.normal_f64();
            for ch in 0..3 {
                *g.at_mut(r, c, ch) = v * tint[ch];
            }
        }
    }
    clamp_unit(&mut g);
    g
}

/// Band-limited oscillations: each class concentrates energy in one of the
/// classic EEG bands (delta, theta, alpha, beta, gamma) at a nominal
/// 128 Hz sampling rate.
pub fn gen_eeg(channels: usize, steps: usize, class: usize, rng: &mut Rng) -> Result<EEGSequence> {
    let bands = [2.0, 6.0, 10.0, 20.0, 40.0];
    let f = bands[class % bands.len()] * (1.0 + 0.05 * rng.normal_f64());
    let fs = 128.0;
    let mut values = Array::zeros(channels, steps);
    for ch in 0..channels {
        let phase = rng.uniform_range(0.0, core::f64::consts::TAU);
        let amp = rng.uniform_range(0.8, 1.2);
        for t in 0..steps {
            let v = amp * (core::f64::consts::TAU * f * t as f64 / fs + phase).sin()
                + 0.3 * rng.normal_f64();
            *values.at_mut(ch, t) = v;
        }
    }
    EEGSequence::new(values).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Class-distinct procedural anchor images: a fixed hue plus a fixed shape
/// family per class, with per-sample position jitter and pixel noise.
pub fn gen_anchor_image(h: usize, w: usize, class: usize, rng: &mut Rng) -> Grid {
    let hues: [[f64; 3]; 5] = [
        [0.9, 0.2, 0.2],
        [0.2, 0.8, 0.3],
        [0.25, 0.35, 0.95],
        [0.95, 0.85, 0.2],
        [0.8, 0.3, 0.9],
    ];
    let hue = hues[class % hues.len()];
    let jx = rng.uniform_range(-2.0, 2.0);
    let jy = rng.uniform_range(-2.0, 2.0);
    let cx = w as f64 / 2.0 + jx;
    let cy = h as f64 / 2.0 + jy;
    let scale = w.min(h) as f64;
    let mut g = Grid::zeros(h, w, 3);
    for r in 0..h {
        for c in 0..w {
            let x = c as f64;
            let y = r as f64;
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let on = match class % 5 {
                // Filled disk.
                0 => d < 0.3 * scale,
                // Square frame.
                1 => {
                    let m = (x - cx).abs().max((y - cy).abs());
                    m > 0.22 * scale && m < 0.36 * scale
                }
                // Diagonal stripes.
                2 => (((x + y) / 6.0).floor() as i64).rem_euclid(2) == 0,
                // Concentric rings.
                3 => ((d / 4.0).floor() as i64).rem_euclid(2) == 0 && d < 0.45 * scale,
                // Checkerboard.
                _ => (((x / 5.0).floor() + (y / 5.0).floor()) as i64).rem_euclid(2) == 0,
            };
            let base = if on { 1.0 } else { 0.12 };
            for ch in 0..3 {
                *g.at_mut(r, c, ch) = base * hue[ch] + 0.02 * rng.normal_f64();
            }
        }
    }
    clamp_unit(&mut g);
    g
}

/// Spread of squared point radii around their mean; separates spheres
/// (all radii equal) from every other shape.
pub fn radius_variance(pc: &PointCloud) -> f64 {
    let n = pc.points.rows();
    let mut radii = Vec::with_capacity(n);
    for i in 0..n {
        let row = pc.points.row_slice(i);
        radii.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let mean = radii.iter().sum::<f64>() / n as f64;
    radii.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64
}

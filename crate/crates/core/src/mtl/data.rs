use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TaskKind, TaskSpec};
use crate::backbone::BackboneConfig;
use crate::params::uniform;
use crate::tensor::Tensor;

/// Per-pixel target of one task on the patch grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Labels(Vec<usize>),
    Values(Vec<f32>),
}

impl Target {
    fn extend(&mut self, other: &Target) {
        match (self, other) {
            (Target::Labels(a), Target::Labels(b)) => a.extend_from_slice(b),
            (Target::Values(a), Target::Values(b)) => a.extend_from_slice(b),
            _ => panic!("mixed target kinds"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Patch grid `(rows, cols)`; targets live at this resolution.
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub in_channels: usize,
    pub tasks: Vec<TaskSpec>,
}

impl SynthSpec {
    pub fn new(backbone: &BackboneConfig, tasks: &[TaskSpec]) -> Self {
        Self {
            grid: (backbone.grid[0], backbone.grid[1]),
            patch_size: backbone.patch_size,
            in_channels: backbone.in_channels,
            tasks: tasks.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// `[Cin×H×W]`
    pub image: Tensor<f32>,
    pub targets: Vec<Target>,
}

/// Stacked samples: images `[B×Cin×H×W]`, targets concatenated per task.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub targets: Vec<Target>,
}

impl Batch {
    pub fn collate(samples: &[SynthSample]) -> Self {
        let first = &samples[0];
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.image.shape());
        let mut data = Vec::with_capacity(samples.len() * first.image.numel());
        let mut targets = first.targets.clone();
        for (i, s) in samples.iter().enumerate() {
            data.extend_from_slice(s.image.data());
            if i > 0 {
                for (t, o) in targets.iter_mut().zip(&s.targets) {
                    t.extend(o);
                }
            }
        }
        Self { images: Tensor::new(&shape, data).expect("uniform samples"), targets }
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Smooth latent field: a few plane waves with random direction, frequency
/// (0.5 to 1.5 cycles per image) and phase.
struct Latent {
    waves: Vec<[f64; 4]>,
}

impl Latent {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..3)
            .map(|_| {
                let amp = 0.75 + 0.25 * uniform(rng, 1.0);
                let freq = 1.0 + 0.5 * uniform(rng, 1.0);
                let dir = std::f64::consts::PI * (1.0 + uniform(rng, 1.0));
                let phase = std::f64::consts::PI * uniform(rng, 1.0);
                [amp, TAU * freq * dir.cos(), TAU * freq * dir.sin(), phase]
            })
            .collect();
        Self { waves }
    }

    /// Value at normalized coordinates `(u, v)` in `[0, 1]²`.
    fn value(&self, u: f64, v: f64) -> f64 {
        self.waves.iter().map(|[a, ku, kv, p]| a * (ku * u + kv * v + p).sin()).sum()
    }

    fn gradient_norm(&self, u: f64, v: f64) -> f64 {
        let (mut gu, mut gv) = (0.0, 0.0);
        for [a, ku, kv, p] in &self.waves {
            let c = a * (ku * u + kv * v + p).cos();
            gu += c * ku;
            gv += c * kv;
        }
        (gu * gu + gv * gv).sqrt()
    }
}

/// Deterministic sample `index` of the dataset `seed`.
pub fn synth_sample(seed: u64, index: u64, spec: &SynthSpec) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let latent = Latent::draw(&mut rng);
    let (gh, gw) = spec.grid;
    let p = spec.patch_size;
    let (h, w) = (gh * p, gw * p);

    let mut image = Vec::with_capacity(spec.in_channels * h * w);
    for c in 0..spec.in_channels {
        for y in 0..h {
            for x in 0..w {
                let l = latent.value((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                let mixed = match c % 3 {
                    0 => 0.5 * l,
                    1 => (1.5 * l).sin(),
                    _ => 0.25 * l * l - 0.5,
                } + 0.1 * (c / 3) as f64;
                image.push((mixed + 0.2 * uniform(&mut rng, 1.0)) as f32);
            }
        }
    }

    let centres: Vec<(f64, f64)> = (0..gh * gw)
        .map(|i| (((i % gw) as f64 + 0.5) / gw as f64, ((i / gw) as f64 + 0.5) / gh as f64))
        .collect();
    let values: Vec<f64> = centres.iter().map(|&(u, v)| latent.value(u, v)).collect();
    let targets = spec
        .tasks
        .iter()
        .map(|task| match task.kind {
            TaskKind::ClassSeg => {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let k = task.classes;
                let span = (hi - lo).max(f64::MIN_POSITIVE);
                Target::Labels(
                    values
                        .iter()
                        .map(|&v| (((v - lo) / span * k as f64) as usize).min(k - 1))
                        .collect(),
                )
            }
            TaskKind::Regression => Target::Values(
                centres
                    .iter()
                    .map(|&(u, v)| (latent.gradient_norm(u, v) / TAU) as f32)
                    .collect(),
            ),
            TaskKind::BinarySaliency => {
                let mut sorted = values.clone();
                sorted.sort_by(f64::total_cmp);
                let n = sorted.len();
                let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
                Target::Values(values.iter().map(|&v| if v > median { 1.0 } else { 0.0 }).collect())
            }
        })
        .collect();

    SynthSample {
        image: Tensor::new(&[spec.in_channels, h, w], image).expect("sized"),
        targets,
    }
}

/// Samples `start .. start + count` of dataset `seed`, generated on up to
/// `workers` threads. The result does not depend on `workers`.
pub fn synth_generate(seed: u64, start: u64, count: usize, spec: &SynthSpec, workers: usize) -> Vec<SynthSample> {
    let workers = workers.clamp(1, count.max(1));
    if workers == 1 {
        return (0..count as u64).map(|i| synth_sample(seed, start + i, spec)).collect();
    }
    let chunk = count.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|wi| {
                scope.spawn(move || {
                    let lo = (wi * chunk).min(count);
                    let hi = ((wi + 1) * chunk).min(count);
                    (lo..hi).map(|i| synth_sample(seed, start + i as u64, spec)).collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator thread")).collect()
    })
}

//! Datasets, the synthetic fine-grained generator and N-way K-shot episode sampling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub id: usize,
    pub split: Split,
    pub samples: Vec<Tensor>,
}

/// Labeled image tensors `[C0,H,W]` grouped by class; every class belongs to one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<ClassRecord>,
}

impl Dataset {
    /// Positions in `classes` of the classes in `split`.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        self.classes.iter().enumerate().filter(|(_, c)| c.split == split).map(|(i, _)| i).collect()
    }

    pub fn sample(&self, r: SampleRef) -> &Tensor {
        &self.classes[r.class].samples[r.index]
    }

    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }

    /// Shape shared by all samples, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.classes.iter().flat_map(|c| c.samples.first()).next().map(Tensor::shape)
    }

    /// Writes `manifest.txt` plus one f32 ARFT file per sample under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("samples"))?;
        let mut manifest = String::new();
        for class in &self.classes {
            for (i, sample) in class.samples.iter().enumerate() {
                let rel = format!("samples/c{:04}_{:04}.arft", class.id, i);
                save_tensor(&dir.join(&rel), sample, DType::F32)?;
                manifest.push_str(&format!("{}\t{}\t{}\n", class.id, class.split, rel));
            }
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
        let mut by_id: BTreeMap<usize, ClassRecord> = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("{}:{}: {what}", path.display(), no + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected class_id<TAB>split<TAB>path"));
            }
            let id: usize = fields[0].parse().map_err(|_| bad("bad class id"))?;
            let split: Split = fields[1].parse().map_err(|_| bad("bad split"))?;
            let tensor = load_tensor(&dir.join(fields[2]))?;
            let rec = by_id.entry(id).or_insert_with(|| ClassRecord { id, split, samples: Vec::new() });
            if rec.split != split {
                return Err(bad(&format!("class {id} appears in splits {} and {split}", rec.split)));
            }
            rec.samples.push(tensor);
        }
        Ok(Dataset { classes: by_id.into_values().collect() })
    }
}

/// Configuration of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Scales all per-sample nuisance variation; 0 makes every sample of a class identical.
    pub difficulty: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_classes: 30,
            val_classes: 10,
            test_classes: 10,
            samples_per_class: 40,
            image_size: 32,
            channels: 3,
            difficulty: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.train_classes + self.val_classes + self.test_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(Error::Config(format!("synthetic dataset needs at least 2 classes, got {}", self.num_classes())));
        }
        if self.samples_per_class == 0 || self.image_size < 4 || self.channels == 0 {
            return Err(Error::Config("samples_per_class, channels must be positive and image_size >= 4".into()));
        }
        if !(self.difficulty >= 0.0 && self.difficulty.is_finite()) {
            return Err(Error::Config(format!("difficulty must be finite and >= 0, got {}", self.difficulty)));
        }
        Ok(())
    }
}

/// Keyed generator for the draw `(seed, stream, index)`.
pub fn keyed_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const CLASS_STREAM: u64 = 0x436c_6173_73;
const SAMPLE_STREAM: u64 = 0x5361_6d70;

/// Fine-grained identity of one synthetic class: every class is the same
/// elliptical body with a head part, differing in texture and part layout.
#[derive(Clone, Debug)]
struct ClassStyle {
    body_color: [f64; 3],
    head_color: [f64; 3],
    stripe_freq: f64,
    stripe_angle: f64,
    spots: Vec<(f64, f64)>,
    head_angle: f64,
}

impl ClassStyle {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut color = |base: f64| [0, 1, 2].map(|_| base + rng.random_range(-0.08..0.08));
        let body_color = color(0.6);
        let head_color = color(0.35);
        let stripe_freq = rng.random_range(1.5..4.0);
        let stripe_angle = rng.random_range(0.0..PI);
        let n_spots = rng.random_range(0..4);
        let spots = (0..n_spots)
            .map(|_| {
                let a = rng.random_range(0.0..2.0 * PI);
                let r = rng.random_range(0.0..0.8f64).sqrt();
                (0.6 * r * a.cos(), 0.35 * r * a.sin())
            })
            .collect();
        let head_angle = rng.random_range(0.0..2.0 * PI);
        Self { body_color, head_color, stripe_freq, stripe_angle, spots, head_angle }
    }
}

fn smoothstep(edge: f64, x: f64) -> f64 {
    (0.5 - x / edge).clamp(0.0, 1.0)
}

fn render(style: &ClassStyle, size: usize, channels: usize, difficulty: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = difficulty;
    let rot = d * rng.random_range(-25f64.to_radians()..=25f64.to_radians());
    let (tx, ty) = (d * rng.random_range(-0.13..=0.13), d * rng.random_range(-0.13..=0.13));
    let zoom = (d * rng.random_range(-0.3..=0.3f64)).exp();
    let brightness = 1.0 + d * rng.random_range(-0.17..=0.17);
    let tint = [0, 1, 2].map(|_| d * rng.random_range(-0.05..=0.05));
    let clutter: Vec<(f64, f64, f64, f64)> = (0..(3.0 * d).round() as usize)
        .map(|_| {
            let (cx, cy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (cx, cy, rng.random_range(0.05..0.3), rng.random_range(-0.15..0.15))
        })
        .collect();
    let noise = 0.08 * d;
    let (sin, cos) = rot.sin_cos();
    let (ax, ay) = (0.62, 0.4);
    let (hx, hy) = (0.72 * style.head_angle.cos(), 0.48 * style.head_angle.sin());
    let (sa_sin, sa_cos) = style.stripe_angle.sin_cos();
    let px = 2.0 / size as f64;

    let mut out = vec![0.0; channels * size * size];
    for y in 0..size {
        for x in 0..size {
            let gx = -1.0 + (x as f64 + 0.5) * px - tx;
            let gy = -1.0 + (y as f64 + 0.5) * px - ty;
            let u = (cos * gx + sin * gy) * zoom;
            let v = (-sin * gx + cos * gy) * zoom;

            let body_r = ((u / ax).powi(2) + (v / ay).powi(2)).sqrt();
            let body = smoothstep(0.1, body_r - 1.0);
            let stripe = 0.5 + 0.5 * (2.0 * PI * style.stripe_freq * (u * sa_cos + v * sa_sin)).cos();
            let spot = style
                .spots
                .iter()
                .map(|&(sx, sy)| (-((u - sx).powi(2) + (v - sy).powi(2)) / 0.006).exp())
                .fold(0.0, f64::max);
            let head_r = ((u - hx).powi(2) + (v - hy).powi(2)).sqrt() / 0.2;
            let head = smoothstep(0.15, head_r - 1.0);
            for c in 0..channels {
                let k = c % 3;
                let body_val = style.body_color[k] * (0.55 + 0.45 * stripe) * (1.0 - 0.8 * spot);
                let bg = 0.2
                    + 0.05 * v
                    + clutter.iter().map(|&(cx, cy, r, a)| a * (-((gx - cx).powi(2) + (gy - cy).powi(2)) / (r * r)).exp()).sum::<f64>();
                let val = bg * (1.0 - body.max(head)) + body_val * body * (1.0 - head) + style.head_color[k] * head;
                out[(c * size + y) * size + x] = val + tint[k] * (body.max(head));
            }
        }
    }
    for val in out.iter_mut() {
        let e: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
        // Stored at single precision so on-disk and in-memory datasets agree.
        *val = ((*val * brightness + noise * e) as f32) as f64;
    }
    Tensor::from_parts(vec![channels, size, size], out)
}

/// Deterministic synthetic dataset: classes `0..train`, then val, then test.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let splits = std::iter::repeat_n(Split::Train, spec.train_classes)
        .chain(std::iter::repeat_n(Split::Val, spec.val_classes))
        .chain(std::iter::repeat_n(Split::Test, spec.test_classes));
    let classes = splits
        .enumerate()
        .map(|(id, split)| {
            let style = ClassStyle::draw(&mut keyed_rng(seed, CLASS_STREAM, id as u64));
            let samples = (0..spec.samples_per_class)
                .map(|i| {
                    let mut rng = keyed_rng(seed, SAMPLE_STREAM, ((id as u64) << 32) | i as u64);
                    render(&style, spec.image_size, spec.channels, spec.difficulty, &mut rng)
                })
                .collect();
            ClassRecord { id, split, samples }
        })
        .collect();
    Ok(Dataset { classes })
}

/// Position of a sample: class index into `Dataset::classes`, sample index within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleRef {
    pub class: usize,
    pub index: usize,
}

/// One N-way K-shot task. Support is class-major (`shot` samples of label 0,
/// then label 1, ...); query holds `query_per_class` samples per label in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Dataset class index of each episode label.
    pub classes: Vec<usize>,
    pub support: Vec<SampleRef>,
    pub query: Vec<SampleRef>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.way).flat_map(|l| std::iter::repeat_n(l, self.shot)).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.way).flat_map(|l| std::iter::repeat_n(l, self.query_per_class)).collect()
    }

    /// Stacks support then query images into one `[S+Q, C0, H, W]` batch.
    pub fn images(&self, dataset: &Dataset) -> Result<Tensor> {
        let all: Vec<&Tensor> = self.support.iter().chain(&self.query).map(|&r| dataset.sample(r)).collect();
        Tensor::stack(&all)
    }
}

/// Draws an episode from the classes at `pool` using `rng`.
pub fn sample_episode(
    dataset: &Dataset,
    pool: &[usize],
    way: usize,
    shot: usize,
    query_per_class: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::Episode("way and shot must be positive".into()));
    }
    if pool.len() < way {
        return Err(Error::Episode(format!("{}-way episode needs {} classes, only {} available", way, way, pool.len())));
    }
    let need = shot + query_per_class;
    let chosen: Vec<usize> = index::sample(rng, pool.len(), way).into_iter().map(|i| pool[i]).collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * query_per_class);
    let mut picks = Vec::with_capacity(way);
    for &class in &chosen {
        let have = dataset.classes[class].samples.len();
        if have < need {
            return Err(Error::Episode(format!(
                "class {} has {} samples, episode needs {} ({} support + {} query)",
                dataset.classes[class].id, have, need, shot, query_per_class
            )));
        }
        picks.push(index::sample(rng, have, need).into_vec());
    }
    for (&class, idx) in chosen.iter().zip(&picks) {
        support.extend(idx[..shot].iter().map(|&index| SampleRef { class, index }));
    }
    for (&class, idx) in chosen.iter().zip(&picks) {
        query.extend(idx[shot..].iter().map(|&index| SampleRef { class, index }));
    }
    Ok(Episode { way, shot, query_per_class, classes: chosen, support, query })
}

/// Reproducible episode sequence: episode `i` depends only on `(seed, stream, i)`.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    pub seed: u64,
    pub stream: u64,
    pub split: Split,
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
}

impl EpisodeSampler {
    pub fn episode(&self, dataset: &Dataset, index: u64) -> Result<Episode> {
        let pool = dataset.split_classes(self.split);
        let mut rng = keyed_rng(self.seed, self.stream, index);
        sample_episode(dataset, &pool, self.way, self.shot, self.query_per_class, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec {
            train_classes: 6,
            val_classes: 2,
            test_classes: 2,
            samples_per_class: 20,
            image_size: 16,
            channels: 3,
            difficulty: 1.0,
        }
    }

    #[test]
    fn counts_and_shapes() {
        let spec = SyntheticSpec { image_size: 32, ..tiny() };
        let ds = generate_synthetic_dataset(&spec, 1).unwrap();
        assert_eq!(ds.num_samples(), 200);
        assert!(ds.classes.iter().all(|c| c.samples.iter().all(|s| s.shape() == [3, 32, 32])));
        assert_eq!(ds.split_classes(Split::Train).len(), 6);
        assert!(ds.classes.iter().all(|c| c.samples.iter().all(Tensor::all_finite)));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset(&tiny(), 3).unwrap();
        let b = generate_synthetic_dataset(&tiny(), 3).unwrap();
        let c = generate_synthetic_dataset(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_difficulty_repeats_the_class_image() {
        let ds = generate_synthetic_dataset(&SyntheticSpec { difficulty: 0.0, ..tiny() }, 5).unwrap();
        for class in &ds.classes {
            assert!(class.samples.iter().all(|s| s == &class.samples[0]));
        }
        assert_ne!(ds.classes[0].samples[0], ds.classes[1].samples[0]);
    }

    #[test]
    fn degenerate_spec() {
        let spec = SyntheticSpec { train_classes: 1, val_classes: 0, test_classes: 0, ..tiny() };
        assert!(matches!(generate_synthetic_dataset(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn episode_counts() {
        let ds = generate_synthetic_dataset(&tiny(), 0).unwrap();
        let pool = ds.split_classes(Split::Train);
        let mut rng = keyed_rng(0, 0, 0);
        let ep = sample_episode(&ds, &pool, 5, 1, 15, &mut rng).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (5, 75));
        let ep = sample_episode(&ds, &pool, 5, 5, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.support_labels()[5..10], [1; 5]);
        let short = &pool[..4];
        assert!(matches!(sample_episode(&ds, short, 5, 1, 15, &mut rng), Err(Error::Episode(_))));
        assert!(matches!(sample_episode(&ds, &pool, 5, 10, 15, &mut rng), Err(Error::Episode(_))));
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let ds = generate_synthetic_dataset(&tiny(), 0).unwrap();
        let sampler = |stream| EpisodeSampler { seed: 9, stream, split: Split::Train, way: 3, shot: 1, query_per_class: 2 };
        let seq = |s: &EpisodeSampler| (0..20).map(|i| s.episode(&ds, i).unwrap()).collect::<Vec<_>>();
        assert_eq!(seq(&sampler(1)), seq(&sampler(1)));
        assert_ne!(seq(&sampler(1)), seq(&sampler(2)));
    }

    #[test]
    fn disk_roundtrip() {
        let ds = generate_synthetic_dataset(&tiny(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().next().unwrap(), "0\ttrain\tsamples/c0000_0000.arft");
        assert_eq!(manifest.lines().count(), 200);
    }

    #[test]
    fn split_conflict_rejected() {
        let ds = generate_synthetic_dataset(&SyntheticSpec { samples_per_class: 1, ..tiny() }, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let path = dir.path().join("manifest.txt");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("0\ttest\tsamples/c0001_0000.arft\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Format(_))));
    }
}

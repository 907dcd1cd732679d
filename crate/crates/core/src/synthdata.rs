//! Synthetic category-discovery tasks with domain shift, corruption kernels
//! and the line-delimited dataset format.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Gaussian,
    Shot,
    Impulse,
    Speckle,
    Fog,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::Gaussian,
        CorruptionKind::Shot,
        CorruptionKind::Impulse,
        CorruptionKind::Speckle,
        CorruptionKind::Fog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Gaussian => "gaussian",
            CorruptionKind::Shot => "shot",
            CorruptionKind::Impulse => "impulse",
            CorruptionKind::Speckle => "speckle",
            CorruptionKind::Fog => "fog",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub kind: CorruptionKind,
    /// 1 (mild) to 5 (severe).
    pub severity: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub num_classes: usize,
    /// Classes `0..num_old` are old; the rest are new.
    pub num_old: usize,
    pub num_domains: usize,
    pub samples_per_class: usize,
    pub patch_count: usize,
    pub input_dim: usize,
    /// Norm of each class prototype over all `P * input_dim` values.
    pub class_separation: f64,
    /// Standard deviation of the per-position offsets shared by every class.
    pub position_scale: f64,
    /// Per-value Gaussian noise around the class prototype.
    pub jitter: f64,
    /// Scale of the per-channel gain and bias of unseen domains.
    pub style_strength: f64,
    /// Corruption of each unseen domain in order; a single entry applies to all.
    pub corruptions: Vec<Corruption>,
    pub labelled_fraction: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_old: 5,
            num_domains: 2,
            samples_per_class: 100,
            patch_count: 16,
            input_dim: 8,
            class_separation: 6.0,
            position_scale: 1.0,
            jitter: 1.0,
            style_strength: 1.0,
            corruptions: vec![Corruption {
                kind: CorruptionKind::Gaussian,
                severity: 3,
            }],
            labelled_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_old == 0 || self.num_old >= self.num_classes {
            return bad(format!(
                "task.num_old must lie in [1, num_classes), got {} of {}",
                self.num_old, self.num_classes
            ));
        }
        if self.num_domains < 2 {
            return bad(format!("task.num_domains must be >= 2, got {}", self.num_domains));
        }
        if self.samples_per_class == 0 || self.patch_count == 0 || self.input_dim == 0 {
            return bad("task sizes must be positive".into());
        }
        if !(self.labelled_fraction > 0.0 && self.labelled_fraction < 1.0) {
            return bad(format!("task.labelled_fraction must lie in (0, 1), got {}", self.labelled_fraction));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("position_scale", self.position_scale),
            ("jitter", self.jitter),
            ("style_strength", self.style_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("task.{name} must be finite and >= 0, got {v}"));
            }
        }
        let unseen = self.num_domains - 1;
        if !(self.corruptions.len() <= 1 || self.corruptions.len() == unseen) {
            return bad(format!(
                "task.corruptions needs 0, 1 or {unseen} entries, got {}",
                self.corruptions.len()
            ));
        }
        if let Some(c) = self.corruptions.iter().find(|c| !(1..=5).contains(&c.severity)) {
            return bad(format!("corruption severity must lie in 1..=5, got {}", c.severity));
        }
        Ok(())
    }

    /// Corruption applied to domain `d >= 1`, if any.
    pub fn corruption_for(&self, domain: usize) -> Option<Corruption> {
        match self.corruptions.len() {
            0 => None,
            1 => Some(self.corruptions[0]),
            _ => self.corruptions.get(domain - 1).copied(),
        }
    }

    pub fn old_classes(&self) -> BTreeSet<usize> {
        (0..self.num_old).collect()
    }

    /// `⌊labelled_fraction · |C1| · samples_per_class⌋`.
    pub fn labelled_count(&self) -> usize {
        (self.labelled_fraction * (self.num_old * self.samples_per_class) as f64).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Labelled,
    UnlabelledSeen,
    UnlabelledUnseen,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Labelled => "labelled",
            Split::UnlabelledSeen => "seen",
            Split::UnlabelledUnseen => "unseen",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "labelled" => Some(Split::Labelled),
            "seen" => Some(Split::UnlabelledSeen),
            "unseen" => Some(Split::UnlabelledUnseen),
            _ => None,
        }
    }

    fn of(labelled: bool, domain: usize) -> Self {
        match (labelled, domain) {
            (true, _) => Split::Labelled,
            (false, 0) => Split::UnlabelledSeen,
            (false, _) => Split::UnlabelledUnseen,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[P, input_dim]`.
    pub patches: Tensor,
    pub class_id: usize,
    pub domain_id: usize,
    pub labelled: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub old_classes: BTreeSet<usize>,
    pub patch_count: usize,
    pub input_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labelled_flags(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.labelled).collect()
    }

    pub fn indices_where(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0)
    }

    /// Standard deviation over every patch value.
    pub fn value_std(&self) -> f64 {
        std_of(self.samples.iter().flat_map(|s| s.patches.data().iter().copied()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "hilo-dataset 1");
        let _ = writeln!(out, "shape {} {} {}", self.len(), self.patch_count, self.input_dim);
        let old: Vec<String> = self.old_classes.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "old {}", old.join(" "));
        for s in &self.samples {
            let _ = write!(out, "{} {} {} {}", s.split.tag(), s.class_id, s.domain_id, s.labelled as u8);
            for v in s.patches.data() {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, "hilo-dataset 1")) => {}
            _ => return Err(parse_err(1, "expected header `hilo-dataset 1`".into())),
        }
        let (ln, shape) = lines.next().ok_or_else(|| parse_err(2, "missing shape line".into()))?;
        let dims: Vec<usize> = shape
            .strip_prefix("shape ")
            .ok_or_else(|| parse_err(ln, "expected `shape <n> <P> <dim>`".into()))?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| parse_err(ln, format!("bad integer {v:?}"))))
            .collect::<Result<_>>()?;
        let [n, p, dim] = dims[..] else {
            return Err(parse_err(ln, "expected three sizes".into()));
        };
        let (ln, old) = lines.next().ok_or_else(|| parse_err(3, "missing old-class line".into()))?;
        let old_classes = old
            .strip_prefix("old")
            .ok_or_else(|| parse_err(ln, "expected `old <classes>`".into()))?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| parse_err(ln, format!("bad class {v:?}"))))
            .collect::<Result<BTreeSet<usize>>>()?;
        let mut samples = Vec::with_capacity(n);
        for (ln, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            let split = f
                .next()
                .and_then(Split::parse)
                .ok_or_else(|| parse_err(ln, "bad split tag".into()))?;
            let mut int = |what: &str| -> Result<usize> {
                f.next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| parse_err(ln, format!("bad {what}")))
            };
            let class_id = int("class id")?;
            let domain_id = int("domain id")?;
            let labelled = match int("labelled flag")? {
                0 => false,
                1 => true,
                _ => return Err(parse_err(ln, "labelled flag must be 0 or 1".into())),
            };
            let values: Vec<f64> = f
                .map(|v| v.parse().map_err(|_| parse_err(ln, format!("bad value {v:?}"))))
                .collect::<Result<_>>()?;
            if values.len() != p * dim {
                return Err(parse_err(ln, format!("expected {} values, got {}", p * dim, values.len())));
            }
            if split != Split::of(labelled, domain_id) || (labelled && !old_classes.contains(&class_id)) {
                return Err(parse_err(ln, "split inconsistent with labelled flag, domain or class".into()));
            }
            samples.push(Sample {
                patches: Tensor::new(vec![p, dim], values)?,
                class_id,
                domain_id,
                labelled,
                split,
            });
        }
        if samples.len() != n {
            return Err(parse_err(0, format!("header declares {n} samples, found {}", samples.len())));
        }
        Ok(Dataset {
            samples,
            old_classes,
            patch_count: p,
            input_dim: dim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn std_of(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sd
        })
        .collect()
}

/// Builds the task. Domain 0 is the seen domain; every other domain applies a
/// per-channel affine style and then its corruption.
pub fn generate(config: &TaskConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (p, dim) = (config.patch_count, config.input_dim);
    let width = p * dim;
    let prototypes: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| {
            let v = gaussian_vec(&mut rng, width, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * config.class_separation / norm).collect()
        })
        .collect();
    let offsets = gaussian_vec(&mut rng, width, config.position_scale);
    let styles: Vec<(Vec<f64>, Vec<f64>)> = (1..config.num_domains)
        .map(|_| {
            let gain = (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (0.5 * config.style_strength * z).exp()
                })
                .collect();
            let bias = gaussian_vec(&mut rng, dim, config.style_strength);
            (gain, bias)
        })
        .collect();

    let mut clean = Vec::with_capacity(config.num_domains * config.num_classes * config.samples_per_class);
    for domain in 0..config.num_domains {
        for (class, proto) in prototypes.iter().enumerate() {
            for _ in 0..config.samples_per_class {
                let noise = gaussian_vec(&mut rng, width, config.jitter);
                let values: Vec<f64> = (0..width).map(|j| proto[j] + offsets[j] + noise[j]).collect();
                clean.push((domain, class, values));
            }
        }
    }
    let scale = std_of(clean.iter().flat_map(|c| c.2.iter().copied()));

    let mut samples = Vec::with_capacity(clean.len());
    for (domain, class, mut values) in clean {
        if domain > 0 {
            let (gain, bias) = &styles[domain - 1];
            for (j, v) in values.iter_mut().enumerate() {
                *v = gain[j % dim] * *v + bias[j % dim];
            }
        }
        let mut patches = Tensor::new(vec![p, dim], values)?;
        if domain > 0 {
            if let Some(c) = config.corruption_for(domain) {
                patches = corrupt(&patches, c, scale, &mut rng)?;
            }
        }
        samples.push(Sample {
            patches,
            class_id: class,
            domain_id: domain,
            labelled: false,
            split: Split::UnlabelledSeen,
        });
    }

    let mut candidates: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].domain_id == 0 && samples[i].class_id < config.num_old)
        .collect();
    candidates.shuffle(&mut rng);
    for &i in candidates.iter().take(config.labelled_count()) {
        samples[i].labelled = true;
    }
    for s in &mut samples {
        s.split = Split::of(s.labelled, s.domain_id);
    }
    Ok(Dataset {
        samples,
        old_classes: config.old_classes(),
        patch_count: p,
        input_dim: dim,
    })
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
const SHOT_LAMBDA: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_FRACTION: [f64; 5] = [0.03, 0.06, 0.09, 0.17, 0.27];
const SPECKLE_SIGMA: [f64; 5] = [0.15, 0.2, 0.35, 0.45, 0.6];
const FOG_STRENGTH: [f64; 5] = [0.15, 0.2, 0.25, 0.3, 0.35];

/// Applies one corruption to `[P, input_dim]` patches. `scale` is the data's
/// typical magnitude (the Gaussian and fog strengths are multiples of it).
pub fn corrupt<R: Rng + ?Sized>(patches: &Tensor, c: Corruption, scale: f64, rng: &mut R) -> Result<Tensor> {
    if !(1..=5).contains(&c.severity) {
        return Err(Error::invalid(format!("severity must lie in 1..=5, got {}", c.severity)));
    }
    if patches.shape().len() != 2 {
        return Err(Error::invalid(format!("corrupt expects [P, dim] patches, got {:?}", patches.shape())));
    }
    let s = (c.severity - 1) as usize;
    let x = patches.data();
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi - lo).max(1e-12);
    let out: Vec<f64> = match c.kind {
        CorruptionKind::Gaussian => {
            let n = Normal::new(0.0, GAUSSIAN_SIGMA[s] * scale).map_err(|e| Error::invalid(e.to_string()))?;
            x.iter().map(|v| v + n.sample(rng)).collect()
        }
        CorruptionKind::Shot => {
            let lam = SHOT_LAMBDA[s];
            x.iter()
                .map(|v| {
                    let rate = (v - lo) / range * lam;
                    let k = if rate > 0.0 {
                        Poisson::new(rate).map_err(|e| Error::invalid(e.to_string()))?.sample(rng)
                    } else {
                        0.0
                    };
                    Ok(lo + k / lam * range)
                })
                .collect::<Result<_>>()?
        }
        CorruptionKind::Impulse => x
            .iter()
            .map(|&v| {
                if rng.gen_bool(IMPULSE_FRACTION[s]) {
                    if rng.gen_bool(0.5) {
                        lo
                    } else {
                        hi
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::Speckle => x
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + v * SPECKLE_SIGMA[s] * z
            })
            .collect(),
        CorruptionKind::Fog => {
            let p = patches.rows();
            let dim = x.len() / p.max(1);
            let field = plasma_fractal(p, rng);
            let t = FOG_STRENGTH[s] * scale;
            x.iter().enumerate().map(|(i, v)| v + t * field[i / dim]).collect()
        }
    };
    Tensor::new(patches.shape().to_vec(), out)
}

/// Diamond-square plasma over the smallest `(2^k + 1)`-sided lattice that
/// holds a `⌈√P⌉`-sided patch grid, cropped to the first `P` cells in row
/// order and rescaled to `[0, 1]`. Roughness halves at each level.
pub fn plasma_fractal<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Vec<f64> {
    let grid = (p as f64).sqrt().ceil().max(1.0) as usize;
    let mut step = 1;
    while step + 1 < grid {
        step *= 2;
    }
    let side = step + 1;
    let mut h = vec![0.0; side * side];
    let at = |r: usize, c: usize| r * side + c;
    let mut wibble = 1.0;
    for (r, c) in [(0, 0), (0, step), (step, 0), (step, step)] {
        h[at(r, c)] = rng.gen_range(-wibble..=wibble);
    }
    while step > 1 {
        let half = step / 2;
        wibble /= 2.0;
        for r in (half..side).step_by(step) {
            for c in (half..side).step_by(step) {
                let avg = (h[at(r - half, c - half)]
                    + h[at(r - half, c + half)]
                    + h[at(r + half, c - half)]
                    + h[at(r + half, c + half)])
                    / 4.0;
                h[at(r, c)] = avg + rng.gen_range(-wibble..=wibble);
            }
        }
        for r in (0..side).step_by(half) {
            let start = if (r / half) % 2 == 0 { half } else { 0 };
            for c in (start..side).step_by(step) {
                let mut sum = 0.0;
                let mut count = 0.0;
                if r >= half {
                    sum += h[at(r - half, c)];
                    count += 1.0;
                }
                if r + half < side {
                    sum += h[at(r + half, c)];
                    count += 1.0;
                }
                if c >= half {
                    sum += h[at(r, c - half)];
                    count += 1.0;
                }
                if c + half < side {
                    sum += h[at(r, c + half)];
                    count += 1.0;
                }
                h[at(r, c)] = sum / count + rng.gen_range(-wibble..=wibble);
            }
        }
        step = half;
    }
    let cells: Vec<f64> = (0..p).map(|i| h[at(i / grid, i % grid)]).collect();
    let (lo, hi) = cells.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        return vec![0.0; p];
    }
    cells.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Mean squared distortion of one corruption over `samples`.
pub fn mean_distortion(samples: &[Tensor], c: Corruption, scale: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let out = corrupt(s, c, scale, &mut rng)?;
        total += out.data().iter().zip(s.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += s.numel();
    }
    Ok(total / count.max(1) as f64)
}

/// One row of the corruption benchmark table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionRow {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub mse: f64,
}

/// Mean distortion of every kind and severity on the clean seen-domain
/// samples of `dataset`.
pub fn distortion_table(dataset: &Dataset, seed: u64) -> Result<Vec<DistortionRow>> {
    let clean: Vec<Tensor> = dataset
        .samples
        .iter()
        .filter(|s| s.domain_id == 0)
        .map(|s| s.patches.clone())
        .collect();
    let scale = std_of(clean.iter().flat_map(|t| t.data().iter().copied()));
    let mut rows = Vec::new();
    for kind in CorruptionKind::ALL {
        for severity in 1..=5u8 {
            let c = Corruption { kind, severity };
            rows.push(DistortionRow {
                kind,
                severity,
                mse: mean_distortion(&clean, c, scale, seed)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{cluster_acc, ss_kmeans};

    fn small() -> TaskConfig {
        TaskConfig {
            num_classes: 4,
            num_old: 2,
            samples_per_class: 10,
            patch_count: 4,
            input_dim: 3,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn splits_follow_the_protocol() {
        let cfg = TaskConfig::default();
        let d = generate(&cfg).unwrap();
        assert_eq!(d.len(), 2000);
        let labelled = d.indices_where(Split::Labelled);
        assert_eq!(labelled.len(), 250);
        for s in &d.samples {
            if s.labelled {
                assert_eq!(s.domain_id, 0);
                assert!(s.class_id < cfg.num_old);
            }
            assert_eq!(s.split, Split::of(s.labelled, s.domain_id));
        }
    }

    #[test]
    fn generation_is_reproducible() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = TaskConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate(&TaskConfig { num_old: 4, ..small() }).is_err());
        assert!(generate(&TaskConfig { num_domains: 1, ..small() }).is_err());
        assert!(generate(&TaskConfig { labelled_fraction: 1.0, ..small() }).is_err());
        let c = Corruption { kind: CorruptionKind::Fog, severity: 6 };
        assert!(generate(&TaskConfig { corruptions: vec![c], ..small() }).is_err());
    }

    fn domain_mean(d: &Dataset, domain: usize) -> Vec<f64> {
        let rows: Vec<&Sample> = d.samples.iter().filter(|s| s.domain_id == domain).collect();
        let width = rows[0].patches.numel();
        let mut m = vec![0.0; width];
        for s in &rows {
            m.iter_mut().zip(s.patches.data()).for_each(|(a, v)| *a += v / rows.len() as f64);
        }
        m
    }

    #[test]
    fn no_style_means_no_shift() {
        let cfg = TaskConfig {
            style_strength: 0.0,
            corruptions: vec![],
            samples_per_class: 200,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        let (a, b) = (domain_mean(&d, 0), domain_mean(&d, 1));
        // each domain mean averages 800 draws of unit noise
        let se = (2.0 / 800.0f64).sqrt();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 5.0 * se));
    }

    #[test]
    fn separated_classes_are_recoverable_by_kmeans() {
        let cfg = TaskConfig {
            class_separation: 40.0,
            jitter: 0.5,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        let seen: Vec<&Sample> = d.samples.iter().filter(|s| s.domain_id == 0).collect();
        let pts: Vec<Vec<f64>> = seen.iter().map(|s| s.patches.data().to_vec()).collect();
        let r = ss_kmeans(&pts, 4, &vec![None; pts.len()], 100, 1e-9, 0).unwrap();
        let truth: Vec<usize> = seen.iter().map(|s| s.class_id).collect();
        assert_eq!(cluster_acc(&truth, &r.assignments, &d.old_classes).unwrap().acc_all, 1.0);
    }

    #[test]
    fn class_means_differ() {
        let cfg = TaskConfig {
            samples_per_class: 50,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        let mean_of = |c: usize| -> Vec<f64> {
            let rows: Vec<&Sample> = d.samples.iter().filter(|s| s.domain_id == 0 && s.class_id == c).collect();
            let mut m = vec![0.0; 12];
            for s in &rows {
                m.iter_mut().zip(s.patches.data()).for_each(|(a, v)| *a += v / rows.len() as f64);
            }
            m
        };
        for a in 0..4 {
            for b in a + 1..4 {
                let dist: f64 = mean_of(a).iter().zip(mean_of(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                assert!(dist > 5.0 * cfg.jitter * (2.0 / 50.0f64).sqrt() * 12f64.sqrt(), "{a} {b} {dist}");
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let d = generate(&small()).unwrap();
        let back = Dataset::from_text(&d.to_text()).unwrap();
        assert_eq!(back, d);
        let broken = d.to_text().replacen("labelled", "unseen", 1);
        assert!(Dataset::from_text(&broken).is_err());
        assert!(Dataset::from_text("nonsense").is_err());
    }

    fn unit_samples(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::new(vec![16, 8], gaussian_vec(&mut rng, 128, 1.0)).unwrap())
            .collect()
    }

    #[test]
    fn gaussian_noise_matches_its_variance() {
        let samples = unit_samples(100, 1);
        let c = Corruption {
            kind: CorruptionKind::Gaussian,
            severity: 5,
        };
        let mse = mean_distortion(&samples, c, 1.0, 3).unwrap();
        assert!((mse - 0.01).abs() < 0.001, "{mse}");
    }

    #[test]
    fn distortion_grows_with_severity() {
        let samples = unit_samples(1000, 2);
        for kind in CorruptionKind::ALL {
            let mses: Vec<f64> = (1..=5)
                .map(|severity| mean_distortion(&samples, Corruption { kind, severity }, 1.0, 7).unwrap())
                .collect();
            assert!(mses.windows(2).all(|w| w[1] > w[0]), "{kind:?}: {mses:?}");
        }
    }

    #[test]
    fn fog_field_is_normalized_and_seeded() {
        for p in [1, 4, 9, 16, 20, 64] {
            let f = plasma_fractal(p, &mut ChaCha8Rng::seed_from_u64(4));
            assert_eq!(f.len(), p);
            assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(f, plasma_fractal(p, &mut ChaCha8Rng::seed_from_u64(4)));
        }
        let bad = Corruption {
            kind: CorruptionKind::Shot,
            severity: 0,
        };
        let t = Tensor::zeros(&[2, 2]);
        assert!(corrupt(&t, bad, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(CorruptionKind::parse("snow").is_err());
    }
}

//! Labeled multi-user, multi-context datasets: CSV ingestion, seeded
//! splits and the synthetic context-shift generator.
//!
//! CSV schema (UTF-8, header required):
//!
//! ```text
//! user_id,context_id,label,f0,f1,...,f{D-1}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CropError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user_id: String,
    pub context_id: String,
    pub label: usize,
    pub features: Vec<f64>,
}

impl Sample {
    pub fn new(
        user_id: impl Into<String>,
        context_id: impl Into<String>,
        label: usize,
        features: Vec<f64>,
    ) -> Self {
        Sample {
            user_id: user_id.into(),
            context_id: context_id.into(),
            label,
            features,
        }
    }
}

/// Records every `(user, context)` pair whose rows were handed out by a
/// dataset. Shared by all datasets derived from the instrumented one.
#[derive(Debug, Default)]
pub struct AccessLog {
    seen: Mutex<BTreeSet<(String, String)>>,
}

impl AccessLog {
    pub fn contexts(&self) -> BTreeSet<String> {
        self.seen
            .lock()
            .unwrap()
            .iter()
            .map(|(_, c)| c.clone())
            .collect()
    }

    pub fn pairs(&self) -> BTreeSet<(String, String)> {
        self.seen.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.seen.lock().unwrap().clear();
    }

    fn record(&self, rows: &[Sample]) {
        let mut seen = self.seen.lock().unwrap();
        for row in rows {
            if !seen.contains(&(row.user_id.clone(), row.context_id.clone())) {
                seen.insert((row.user_id.clone(), row.context_id.clone()));
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    rows: Vec<Sample>,
    num_features: usize,
    num_classes: usize,
    log: Option<Arc<AccessLog>>,
}

impl PartialEq for LabeledDataset {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.num_features == other.num_features
            && self.num_classes == other.num_classes
    }
}

impl LabeledDataset {
    /// Infers the feature width from the first row and the class count as
    /// `max(label) + 1`.
    pub fn from_rows(rows: Vec<Sample>) -> Result<Self> {
        let num_classes = rows.iter().map(|r| r.label + 1).max().unwrap_or(0);
        Self::with_classes(rows, num_classes)
    }

    pub fn with_classes(rows: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let num_features = rows.first().map_or(0, |r| r.features.len());
        for (i, row) in rows.iter().enumerate() {
            if row.features.len() != num_features {
                return Err(CropError::structural(format!(
                    "row {i} has {} features, expected {num_features}",
                    row.features.len()
                )));
            }
            if row.label >= num_classes {
                return Err(CropError::structural(format!(
                    "row {i} has label {} but only {num_classes} classes",
                    row.label
                )));
            }
        }
        Ok(LabeledDataset {
            rows,
            num_features,
            num_classes,
            log: None,
        })
    }

    /// Attaches an access log; every later call to [`rows`](Self::rows) on
    /// this dataset or anything filtered from it is recorded.
    pub fn instrumented(mut self) -> (Self, Arc<AccessLog>) {
        let log = Arc::new(AccessLog::default());
        self.log = Some(log.clone());
        (self, log)
    }

    pub fn rows(&self) -> &[Sample] {
        if let Some(log) = &self.log {
            log.record(&self.rows);
        }
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn users(&self) -> BTreeSet<String> {
        self.rows().iter().map(|r| r.user_id.clone()).collect()
    }

    pub fn contexts(&self) -> BTreeSet<String> {
        self.rows().iter().map(|r| r.context_id.clone()).collect()
    }

    /// Row count per label, for labels that occur.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for r in self.rows() {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        counts
    }

    fn derive(&self, rows: Vec<Sample>) -> Self {
        LabeledDataset {
            num_features: if rows.is_empty() {
                self.num_features
            } else {
                rows[0].features.len()
            },
            rows,
            num_classes: self.num_classes,
            log: self.log.clone(),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> Self {
        let rows = self.rows().iter().filter(|r| keep(r)).cloned().collect();
        self.derive(rows)
    }

    pub fn for_user(&self, user: &str) -> Self {
        self.filter(|r| r.user_id == user)
    }

    pub fn for_context(&self, context: &str) -> Self {
        self.filter(|r| r.context_id == context)
    }

    pub fn for_users(&self, users: &BTreeSet<String>) -> Self {
        self.filter(|r| users.contains(&r.user_id))
    }

    pub fn for_contexts(&self, contexts: &BTreeSet<String>) -> Self {
        self.filter(|r| contexts.contains(&r.context_id))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let rows = self.rows();
        self.derive(indices.iter().map(|&i| rows[i].clone()).collect())
    }

    /// Concatenates rows of datasets with the same feature width.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self> {
        let num_classes = parts.iter().map(|p| p.num_classes).max().unwrap_or(0);
        let rows = parts.iter().flat_map(|p| p.rows().iter().cloned()).collect();
        Self::with_classes(rows, num_classes)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let parse_err = |line: usize, message: String| CropError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| parse_err(1, e.to_string()))?;
        let header = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        if header.len() < 4
            || &header[0] != "user_id"
            || &header[1] != "context_id"
            || &header[2] != "label"
        {
            return Err(parse_err(
                1,
                "header must be user_id,context_id,label,f0,...".into(),
            ));
        }
        for (i, name) in header.iter().skip(3).enumerate() {
            if name != format!("f{i}") {
                return Err(parse_err(1, format!("expected column f{i}, found {name}")));
            }
        }
        let width = header.len() - 3;

        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != width + 3 {
                return Err(CropError::Structural(format!(
                    "{}:{line}: row has {} feature(s), header declares {width}",
                    path.display(),
                    record.len().saturating_sub(3)
                )));
            }
            let label: usize = record[2]
                .parse()
                .map_err(|_| parse_err(line, format!("label {:?} is not a class index", &record[2])))?;
            let features = record
                .iter()
                .skip(3)
                .enumerate()
                .map(|(j, field)| {
                    field
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(line, format!("feature f{j} {field:?} is not a finite number")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(Sample::new(&record[0], &record[1], label, features));
        }
        let mut data = Self::from_rows(rows)?;
        if data.rows.is_empty() {
            data.num_features = width;
        }
        Ok(data)
    }

    /// Writes the dataset in the CSV schema. Floats use the shortest
    /// representation that parses back to the identical bits.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "user_id,context_id,label")?;
        for j in 0..self.num_features {
            write!(out, ",f{j}")?;
        }
        writeln!(out)?;
        for r in self.rows() {
            write!(out, "{},{},{}", r.user_id, r.context_id, r.label)?;
            for v in &r.features {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyBy {
    Label,
    None,
}

/// Allocates `n` items to parts proportionally to `fractions` by largest
/// remainder. With `min_one`, every part with a nonzero fraction gets at
/// least one item.
fn allocate(n: usize, fractions: &[f64], min_one: bool) -> Option<Vec<usize>> {
    let mut counts: Vec<usize> = fractions
        .iter()
        .map(|f| (f * n as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut by_remainder: Vec<usize> = (0..fractions.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = fractions[a] * n as f64 - counts[a] as f64;
        let rb = fractions[b] * n as f64 - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in by_remainder.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    if min_one {
        let nonzero = fractions.iter().filter(|f| **f > 0.0).count();
        if n < nonzero {
            return None;
        }
        for i in 0..fractions.len() {
            if fractions[i] > 0.0 && counts[i] == 0 {
                let donor = (0..counts.len()).max_by_key(|&j| (counts[j], usize::MAX - j))?;
                counts[donor] -= 1;
                counts[i] += 1;
            }
        }
    }
    Some(counts)
}

/// Seeded partition of `data` into `fractions.len()` disjoint parts whose
/// union is `data`. Rows keep their original relative order in each part.
pub fn split(
    data: &LabeledDataset,
    fractions: &[f64],
    stratify_by: StratifyBy,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
        return Err(CropError::usage("fractions must be nonnegative"));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CropError::usage("fractions must sum to 1"));
    }
    let rows = data.rows();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let key = match stratify_by {
            StratifyBy::Label => r.label,
            StratifyBy::None => 0,
        };
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; rows.len()];
    for (key, mut members) in groups {
        let counts = allocate(members.len(), fractions, stratify_by == StratifyBy::Label)
            .ok_or_else(|| {
                CropError::usage(format!(
                    "class {key} has {} row(s), too few to stratify into {} parts",
                    members.len(),
                    fractions.iter().filter(|f| **f > 0.0).count()
                ))
            })?;
        members.shuffle(&mut rng);
        let mut start = 0;
        for (part, count) in counts.into_iter().enumerate() {
            for &i in &members[start..start + count] {
                assignment[i] = part;
            }
            start += count;
        }
    }
    Ok((0..fractions.len())
        .map(|part| {
            let idx: Vec<usize> = (0..rows.len()).filter(|&i| assignment[i] == part).collect();
            data.subset(&idx)
        })
        .collect())
}

pub(crate) fn stratified_split(
    data: &LabeledDataset,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    split(data, fractions, StratifyBy::Label, seed)
}

/// Seeded partition of whole users: every user lands in exactly one part.
pub fn split_users(
    data: &LabeledDataset,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let users: Vec<String> = data.users().into_iter().collect();
    let marker = users
        .iter()
        .map(|u| Sample::new(u.clone(), "", 0, vec![]))
        .collect();
    let index = LabeledDataset::with_classes(marker, 1)?;
    split(&index, fractions, StratifyBy::Label, seed).map(|parts| {
        parts
            .into_iter()
            .map(|p| data.for_users(&p.users()))
            .collect()
    })
}

/// Per-context change of coordinates: a rotation by `angle` radians in
/// each of `floor(D/2)` random orthogonal planes, then a shift by a random
/// direction scaled to `bias_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextTransform {
    pub angle: f64,
    pub bias_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_generic_users: usize,
    pub num_personal_users: usize,
    pub num_classes: usize,
    pub num_features: usize,
    /// Standard deviation of the global class means.
    pub class_spread: f64,
    /// Standard deviation of each user's offset from the global class means.
    pub user_jitter: f64,
    /// One entry per context; at least two.
    pub contexts: Vec<ContextTransform>,
    pub noise_sigma: f64,
    pub samples_per_cell: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_generic_users: 12,
            num_personal_users: 4,
            num_classes: 4,
            num_features: 8,
            class_spread: 1.5,
            user_jitter: 0.6,
            contexts: vec![
                ContextTransform {
                    angle: 0.0,
                    bias_scale: 0.0,
                },
                ContextTransform {
                    angle: 0.9,
                    bias_scale: 1.0,
                },
            ],
            noise_sigma: 1.0,
            samples_per_cell: 40,
            seed: 7,
        }
    }
}

/// The affine map `x -> Q x + b` for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMap {
    /// Row-major `D x D` orthogonal matrix.
    pub rotation: Vec<f64>,
    pub shift: Vec<f64>,
}

impl ContextMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| {
                let row = &self.rotation[i * d..(i + 1) * d];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.shift[i]
            })
            .collect()
    }
}

/// Population parameters behind a generated dataset, exposed so tests can
/// compute Bayes-optimal rates against the known densities.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub class_means: Vec<Vec<f64>>,
    /// `user_id -> per-class means` before any context map.
    pub user_means: BTreeMap<String, Vec<Vec<f64>>>,
    pub context_maps: Vec<ContextMap>,
    pub generic_users: Vec<String>,
    pub personal_users: Vec<String>,
}

impl SyntheticWorld {
    /// Noise-free class centre of `user` in context `ctx`.
    pub fn centre(&self, user: &str, ctx: usize, class: usize) -> Vec<f64> {
        self.context_maps[ctx].apply(&self.user_means[user][class])
    }
}

pub fn context_id(index: usize) -> String {
    format!("c{index}")
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Gram-Schmidt on Gaussian vectors; returns `d` orthonormal columns
/// stored as rows.
fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d, 1.0);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn context_map(t: &ContextTransform, d: usize, rng: &mut ChaCha8Rng) -> ContextMap {
    let basis = random_orthonormal(rng, d);
    let (s, c) = t.angle.sin_cos();
    // R = I + sum over planes (u,v) of (c-1)(uu' + vv') + s(vu' - uv')
    let mut rotation = vec![0.0; d * d];
    for i in 0..d {
        rotation[i * d + i] = 1.0;
    }
    for pair in basis.chunks_exact(2) {
        let (u, v) = (&pair[0], &pair[1]);
        for i in 0..d {
            for j in 0..d {
                rotation[i * d + j] +=
                    (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
            }
        }
    }
    let dir = gaussian_vec(rng, d, 1.0);
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let shift = dir.iter().map(|x| t.bias_scale * x / norm).collect();
    ContextMap { rotation, shift }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_generic_users + self.num_personal_users == 0 {
            return Err(CropError::usage("synthetic spec needs at least one user"));
        }
        if self.num_classes < 2 || self.num_features == 0 || self.samples_per_cell == 0 {
            return Err(CropError::usage(
                "synthetic spec needs >= 2 classes, >= 1 feature and >= 1 sample per cell",
            ));
        }
        if self.contexts.len() < 2 {
            return Err(CropError::usage("synthetic spec needs at least two contexts"));
        }
        for (i, a) in self.contexts.iter().enumerate() {
            for b in &self.contexts[i + 1..] {
                if a == b {
                    return Err(CropError::usage("context transforms must differ"));
                }
            }
        }
        if !(self.noise_sigma >= 0.0 && self.class_spread > 0.0 && self.user_jitter >= 0.0) {
            return Err(CropError::usage("scales must be nonnegative"));
        }
        if self.contexts.iter().any(|t| !t.angle.is_finite() || t.angle.abs() > 2.0 * PI) {
            return Err(CropError::usage("context angles must lie in [-2pi, 2pi]"));
        }
        Ok(())
    }

    /// Samples the population: class means, per-user means and context maps.
    pub fn world(&self) -> Result<SyntheticWorld> {
        self.validate()?;
        let d = self.num_features;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let class_means: Vec<Vec<f64>> = (0..self.num_classes)
            .map(|_| gaussian_vec(&mut rng, d, self.class_spread))
            .collect();
        let context_maps = self
            .contexts
            .iter()
            .map(|t| context_map(t, d, &mut rng))
            .collect();
        let generic_users: Vec<String> =
            (0..self.num_generic_users).map(|i| format!("g{i}")).collect();
        let personal_users: Vec<String> =
            (0..self.num_personal_users).map(|i| format!("p{i}")).collect();
        let mut user_means = BTreeMap::new();
        for user in generic_users.iter().chain(&personal_users) {
            let means = class_means
                .iter()
                .map(|m| {
                    let jitter = gaussian_vec(&mut rng, d, self.user_jitter);
                    m.iter().zip(jitter).map(|(a, b)| a + b).collect()
                })
                .collect();
            user_means.insert(user.clone(), means);
        }
        Ok(SyntheticWorld {
            class_means,
            user_means,
            context_maps,
            generic_users,
            personal_users,
        })
    }

    /// Draws the dataset. Rows are ordered by user, context, class.
    pub fn generate(&self) -> Result<LabeledDataset> {
        Ok(self.generate_with_world()?.0)
    }

    pub fn generate_with_world(&self) -> Result<(LabeledDataset, SyntheticWorld)> {
        let world = self.world()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let mut rows = Vec::new();
        for user in world.generic_users.iter().chain(&world.personal_users) {
            for (ctx, map) in world.context_maps.iter().enumerate() {
                for class in 0..self.num_classes {
                    let centre = map.apply(&world.user_means[user][class]);
                    for _ in 0..self.samples_per_cell {
                        let noise = gaussian_vec(&mut rng, self.num_features, self.noise_sigma);
                        let x = centre.iter().zip(noise).map(|(a, b)| a + b).collect();
                        rows.push(Sample::new(user.clone(), context_id(ctx), class, x));
                    }
                }
            }
        }
        let data = LabeledDataset::with_classes(rows, self.num_classes)?;
        Ok((data, world))
    }
}

/// Convenience wrapper for [`SyntheticSpec::generate`].
pub fn generate(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.generate()
}

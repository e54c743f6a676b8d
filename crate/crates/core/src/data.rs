//! Seeded synthetic concept datasets.
//!
//! * `points2d`: 2-D points drawn from labeled Gaussian concepts.
//! * `blobs`: `H x W` rasters holding 1..=5 Gaussian blobs, each scene
//!   labeled with the coordinate of one of its blobs. One label per
//!   multi-object scene means a conjunction of positions at sampling time is
//!   a combination never seen during training.
//!
//! Grid convention for blobs: cell `(i, j)` (row `i`, column `j`) is centered
//! at `x = -1 + (2j + 1) / W`, `y = -1 + (2i + 1) / H`; pixels are stored
//! row-major and mapped from intensity `v in [0, 1]` to `2v - 1`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compose::ConceptTable;
use crate::error::{Error, Result};
use crate::rng;
use crate::scorefield::{ConceptLabel, GaussianSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointConcept {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PointConcept {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("c{}", self.id))
    }

    pub fn spec(&self) -> Result<GaussianSpec> {
        GaussianSpec::new(self.mean.clone(), self.var.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    /// Standard deviation in grid cells.
    #[serde(default = "default_blob_std")]
    pub blob_std: f64,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
}

fn default_side() -> usize {
    16
}
fn default_blob_std() -> f64 {
    1.0
}
fn default_min_objects() -> usize {
    1
}
fn default_max_objects() -> usize {
    5
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            height: default_side(),
            width: default_side(),
            blob_std: default_blob_std(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
        }
    }
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("blob grids must be at least 8x8".into()));
        }
        if !(self.blob_std.is_finite() && self.blob_std > 0.0) {
            return Err(Error::Config("blob_std must be positive".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("objects-per-scene range must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            -1.0 + (2 * j + 1) as f64 / self.width as f64,
            -1.0 + (2 * i + 1) as f64 / self.height as f64,
        ]
    }

    /// Squared distance in cell units between two positions.
    pub fn cell_dist2(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let dx = (a[0] - b[0]) * self.width as f64 / 2.0;
        let dy = (a[1] - b[1]) * self.height as f64 / 2.0;
        dx * dx + dy * dy
    }

    /// Intensities in `[0, 1]` of a scene with blobs at `objects`.
    pub fn render(&self, objects: &[[f64; 2]]) -> Vec<f64> {
        let two_var = 2.0 * self.blob_std * self.blob_std;
        let mut out = vec![0.0; self.dim()];
        for i in 0..self.height {
            for j in 0..self.width {
                let c = self.cell_center(i, j);
                let v: f64 = objects.iter().map(|&o| (-self.cell_dist2(c, o) / two_var).exp()).sum();
                out[i * self.width + j] = v.min(1.0);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetKind {
    Points2d { concepts: Vec<PointConcept> },
    Blobs(BlobConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub count: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            DatasetKind::Points2d { concepts } => {
                if concepts.is_empty() {
                    return Err(Error::Config("points2d needs at least one concept".into()));
                }
                for c in concepts {
                    let spec = c.spec().map_err(|e| Error::Config(format!("concept {}: {e}", c.id)))?;
                    if spec.dim() != 2 {
                        return Err(Error::Config(format!("concept {} is not 2-D", c.id)));
                    }
                }
                let mut ids: Vec<u32> = concepts.iter().map(|c| c.id).collect();
                ids.sort_unstable();
                ids.dedup();
                if ids.len() != concepts.len() {
                    return Err(Error::Config("duplicate concept ids".into()));
                }
            }
            DatasetKind::Blobs(b) => b.validate()?,
        }
        if self.count == 0 {
            return Err(Error::Config("dataset count must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            DatasetKind::Points2d { .. } => 2,
            DatasetKind::Blobs(b) => b.dim(),
        }
    }

    /// Label vocabulary for composition parsing.
    pub fn concept_table(&self) -> ConceptTable {
        match &self.kind {
            DatasetKind::Points2d { concepts } => {
                let mut t = ConceptTable::new();
                for c in concepts {
                    t.insert(c.name(), ConceptLabel::Discrete(c.id));
                }
                t
            }
            DatasetKind::Blobs(_) => ConceptTable::with_coords(2),
        }
    }

    /// Number of embedding rows a discrete-conditioned network needs.
    pub fn num_discrete(&self) -> usize {
        match &self.kind {
            DatasetKind::Points2d { concepts } => concepts.iter().map(|c| c.id as usize + 1).max().unwrap_or(0),
            DatasetKind::Blobs(_) => 0,
        }
    }

    pub fn generate(&self) -> Result<Vec<Example>> {
        self.validate()?;
        match &self.kind {
            DatasetKind::Points2d { concepts } => gen_points2d(concepts, self.count, self.seed),
            DatasetKind::Blobs(b) => gen_blobs(b, self.count, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x0: Vec<f64>,
    pub label: ConceptLabel,
    /// Every blob position in the scene (blobs only).
    pub objects: Vec<[f64; 2]>,
}

pub fn gen_points2d(concepts: &[PointConcept], count: usize, seed: u64) -> Result<Vec<Example>> {
    if concepts.is_empty() {
        return Err(Error::Dataset("no concepts".into()));
    }
    let specs: Vec<GaussianSpec> = concepts.iter().map(|c| c.spec()).collect::<Result<_>>()?;
    Ok((0..count)
        .map(|i| {
            let mut r = rng::stream(seed, rng::domain::DATA_EXAMPLE + i as u64);
            let k = rng::int_inclusive(&mut r, 0, concepts.len() - 1);
            let spec = &specs[k];
            let x0 = spec
                .mean
                .iter()
                .zip(&spec.var)
                .map(|(m, v)| m + v.sqrt() * rng::normal(&mut r))
                .collect();
            Example { x0, label: ConceptLabel::Discrete(concepts[k].id), objects: Vec::new() }
        })
        .collect())
}

const PLACEMENT_RETRIES: usize = 100;

/// Positions for one scene with pairwise separation of at least two blob
/// standard deviations.
fn place_objects(cfg: &BlobConfig, k: usize, r: &mut rng::StreamRng) -> Result<Vec<[f64; 2]>> {
    let min_d2 = (2.0 * cfg.blob_std).powi(2);
    let mut objects: Vec<[f64; 2]> = Vec::with_capacity(k);
    let mut retries = 0;
    while objects.len() < k {
        let p = [2.0 * rng::uniform(r) - 1.0, 2.0 * rng::uniform(r) - 1.0];
        if objects.iter().all(|&o| cfg.cell_dist2(o, p) >= min_d2) {
            objects.push(p);
        } else {
            retries += 1;
            if retries > PLACEMENT_RETRIES {
                return Err(Error::Dataset(format!(
                    "could not place {k} blobs with separation {} cells",
                    2.0 * cfg.blob_std
                )));
            }
        }
    }
    Ok(objects)
}

pub fn gen_blobs(cfg: &BlobConfig, count: usize, seed: u64) -> Result<Vec<Example>> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, rng::domain::DATA_EXAMPLE + i as u64);
            let k = rng::int_inclusive(&mut r, cfg.min_objects, cfg.max_objects);
            let objects = place_objects(cfg, k, &mut r)?;
            let which = rng::int_inclusive(&mut r, 0, k - 1);
            let x0 = cfg.render(&objects).into_iter().map(|v| 2.0 * v - 1.0).collect();
            Ok(Example { x0, label: ConceptLabel::Coord(objects[which].to_vec()), objects })
        })
        .collect()
}

/// One epoch of shuffled index batches; the final short batch is kept.
pub fn minibatches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Dataset("empty dataset".into()));
    }
    if batch_size == 0 || batch_size > len {
        return Err(Error::invalid(format!("batch size {batch_size} must be in 1..={len}")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    rng::shuffle(&mut rng::stream(epoch_seed, rng::domain::SHUFFLE), &mut idx);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Endless batch stream over epochs; epoch `e` is shuffled with its own seed.
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        minibatches(len, batch_size, seed)?;
        Ok(Self { len, batch_size, seed, epoch: 0, pending: Vec::new().into_iter() })
    }

    fn epoch_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch)
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        loop {
            if let Some(b) = self.pending.next() {
                return Some(b);
            }
            let batches = minibatches(self.len, self.batch_size, self.epoch_seed()).ok()?;
            self.epoch += 1;
            self.pending = batches.into_iter();
        }
    }
}

/// `x,y,label_id` rows.
pub fn points_to_csv(examples: &[Example]) -> Result<String> {
    let mut out = String::from("x,y,label_id\n");
    for e in examples {
        let ConceptLabel::Discrete(id) = e.label else {
            return Err(Error::Dataset("points2d rows need discrete labels".into()));
        };
        if e.x0.len() != 2 {
            return Err(Error::Dataset("points2d rows must be 2-D".into()));
        }
        out.push_str(&format!("{},{},{id}\n", e.x0[0], e.x0[1]));
    }
    Ok(out)
}

pub fn points_from_csv(text: &str) -> Result<Vec<Example>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "x,y,label_id" => {}
        _ => return Err(Error::Dataset("missing `x,y,label_id` header".into())),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Dataset(format!("line {}: malformed row `{line}`", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            let x: f64 = f[0].trim().parse().map_err(|_| bad())?;
            let y: f64 = f[1].trim().parse().map_err(|_| bad())?;
            let id: u32 = f[2].trim().parse().map_err(|_| bad())?;
            Ok(Example { x0: vec![x, y], label: ConceptLabel::Discrete(id), objects: Vec::new() })
        })
        .collect()
}

pub const BLOB_MAGIC: &[u8; 8] = b"CDBLOBS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobFileHeader {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub blob_std: f64,
    pub seed: u64,
}

/// Binary raster layout (little endian):
///
/// ```text
/// magic        8 bytes   "CDBLOBS1"
/// header_len   u32
/// header       header_len bytes of UTF-8 JSON (BlobFileHeader)
/// count records, each:
///   label_x, label_y      f64, f64
///   n_objects             u32
///   objects               n_objects x (f64 x, f64 y)
///   pixels                height*width f64, row-major, in [-1, 1]
/// ```
pub fn write_blobs(mut w: impl Write, header: &BlobFileHeader, examples: &[Example]) -> Result<()> {
    if header.count != examples.len() {
        return Err(Error::Dataset("header count does not match examples".into()));
    }
    let json = serde_json::to_vec(header)?;
    w.write_all(BLOB_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let dim = header.height * header.width;
    for e in examples {
        let ConceptLabel::Coord(c) = &e.label else {
            return Err(Error::Dataset("blob scenes need coordinate labels".into()));
        };
        if c.len() != 2 || e.x0.len() != dim {
            return Err(Error::Dataset("blob record has the wrong shape".into()));
        }
        for v in c {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(e.objects.len() as u32).to_le_bytes())?;
        for o in &e.objects {
            w.write_all(&o[0].to_le_bytes())?;
            w.write_all(&o[1].to_le_bytes())?;
        }
        for v in &e.x0 {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_blobs(mut r: impl Read) -> Result<(BlobFileHeader, Vec<Example>)> {
    let trunc = |_| Error::Dataset("truncated blob file".into());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::Dataset("not a blob raster file".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(trunc)?;
    let mut json = vec![0u8; u32::from_le_bytes(u32b) as usize];
    r.read_exact(&mut json).map_err(trunc)?;
    let header: BlobFileHeader = serde_json::from_slice(&json)?;
    let mut f64b = [0u8; 8];
    let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
        r.read_exact(&mut f64b).map_err(trunc)?;
        Ok(f64::from_le_bytes(f64b))
    };
    let dim = header.height * header.width;
    let mut examples = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let label = vec![read_f64(&mut r)?, read_f64(&mut r)?];
        r.read_exact(&mut u32b).map_err(trunc)?;
        let n = u32::from_le_bytes(u32b) as usize;
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            objects.push([read_f64(&mut r)?, read_f64(&mut r)?]);
        }
        let x0 = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
        examples.push(Example { x0, label: ConceptLabel::Coord(label), objects });
    }
    Ok((header, examples))
}

/// A dataset in its native format (CSV for points, binary for blobs).
pub fn dataset_bytes(config: &DatasetConfig, examples: &[Example]) -> Result<Vec<u8>> {
    Ok(match &config.kind {
        DatasetKind::Points2d { .. } => points_to_csv(examples)?.into_bytes(),
        DatasetKind::Blobs(b) => {
            let header = BlobFileHeader {
                height: b.height,
                width: b.width,
                count: examples.len(),
                blob_std: b.blob_std,
                seed: config.seed,
            };
            let mut buf = Vec::new();
            write_blobs(&mut buf, &header, examples)?;
            buf
        }
    })
}

pub fn save_dataset(config: &DatasetConfig, examples: &[Example], path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path, &dataset_bytes(config, examples)?)
}

/// Read either format, recognizing blob files by their magic bytes.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BLOB_MAGIC) {
        Ok(read_blobs(bytes.as_slice())?.1)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Dataset("dataset is neither CSV nor a blob file".into()))?;
        points_from_csv(text)
    }
}

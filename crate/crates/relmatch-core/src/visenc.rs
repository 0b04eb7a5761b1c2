//! Precomputed visual features: ingestion of the binary per-image feature
//! files, affine projection of region/relation rows into the joint space,
//! and a synthetic generator for desk-scale experiments.

use crate::diffcore::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParamBindings;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const FEATURE_MAGIC: &[u8; 4] = b"RSGF";
pub const FEATURE_VERSION: u32 = 1;

/// One detected relation triplet with its confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationTriplet {
    pub subject: u32,
    pub predicate: u32,
    pub object: u32,
    pub confidence: f32,
}

/// Raw per-image features: `k x d_v` region rows and `m x d_r` relation rows
/// with triplet labels, relations kept sorted by descending confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureSet {
    pub image_id: u64,
    pub regions: Array,
    pub relations: Array,
    pub triplets: Vec<RelationTriplet>,
}

impl VisualFeatureSet {
    pub fn new(
        image_id: u64,
        regions: Array,
        relations: Array,
        triplets: Vec<RelationTriplet>,
    ) -> Result<Self> {
        if regions.ndim() != 2 || regions.shape()[0] == 0 {
            return Err(Error::BadRank {
                op: "VisualFeatureSet",
                expected: "a non-empty 2-D region matrix",
                shape: regions.shape().to_vec(),
            });
        }
        if relations.ndim() != 2 {
            return Err(Error::BadRank {
                op: "VisualFeatureSet",
                expected: "a 2-D relation matrix",
                shape: relations.shape().to_vec(),
            });
        }
        if relations.shape()[0] != triplets.len() {
            return Err(Error::DimMismatch {
                what: "relation triplet labels",
                expected: relations.shape()[0],
                got: triplets.len(),
            });
        }
        let mut set = VisualFeatureSet {
            image_id,
            regions,
            relations,
            triplets,
        };
        set.sort_relations_by_confidence();
        Ok(set)
    }

    pub fn region_count(&self) -> usize {
        self.regions.shape()[0]
    }

    pub fn relation_count(&self) -> usize {
        self.relations.shape()[0]
    }

    pub fn region_dim(&self) -> usize {
        self.regions.shape()[1]
    }

    pub fn relation_dim(&self) -> usize {
        self.relations.shape()[1]
    }

    /// Stable sort by descending confidence; equal confidences keep their
    /// original order.
    fn sort_relations_by_confidence(&mut self) {
        let m = self.relation_count();
        if m <= 1 {
            return;
        }
        let d = self.relation_dim();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            self.triplets[b]
                .confidence
                .partial_cmp(&self.triplets[a].confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if order.iter().enumerate().all(|(i, &o)| i == o) {
            return;
        }
        let mut data = Vec::with_capacity(m * d);
        let mut triplets = Vec::with_capacity(m);
        for &o in &order {
            data.extend_from_slice(self.relations.row_slice(o));
            triplets.push(self.triplets[o]);
        }
        self.relations = Array::from_vec(vec![m, d], data).expect("sorted relation shape");
        self.triplets = triplets;
    }

    /// Keep only the `max` highest-confidence relations.
    pub fn truncate_relations(&mut self, max: usize) {
        let m = self.relation_count();
        if m <= max {
            return;
        }
        let d = self.relation_dim();
        let data = self.relations.data()[..max * d].to_vec();
        self.relations = Array::from_vec(vec![max, d], data).expect("truncated relation shape");
        self.triplets.truncate(max);
    }
}

/// Affine projection weights into the joint `h`-dimensional space.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoderParams {
    pub w_regions: Array,
    pub b_regions: Array,
    pub w_relations: Array,
    pub b_relations: Array,
}

impl VisualEncoderParams {
    pub fn init(joint_dim: usize, d_v: usize, d_r: usize, rng: &mut impl Rng) -> Self {
        VisualEncoderParams {
            w_regions: Array::xavier(joint_dim, d_v, rng),
            b_regions: Array::zeros(&[joint_dim]),
            w_relations: Array::xavier(joint_dim, d_r, rng),
            b_relations: Array::zeros(&[joint_dim]),
        }
    }

    pub fn joint_dim(&self) -> usize {
        self.w_regions.shape()[0]
    }

    pub fn region_dim(&self) -> usize {
        self.w_regions.shape()[1]
    }

    pub fn relation_dim(&self) -> usize {
        self.w_relations.shape()[1]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Array)> {
        vec![
            (format!("{prefix}.w_regions"), &self.w_regions),
            (format!("{prefix}.b_regions"), &self.b_regions),
            (format!("{prefix}.w_relations"), &self.w_relations),
            (format!("{prefix}.b_relations"), &self.b_relations),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array)> {
        vec![
            (format!("{prefix}.w_regions"), &mut self.w_regions),
            (format!("{prefix}.b_regions"), &mut self.b_regions),
            (format!("{prefix}.w_relations"), &mut self.w_relations),
            (format!("{prefix}.b_relations"), &mut self.b_relations),
        ]
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        reg: &mut ParamBindings,
        prefix: &str,
    ) -> VisualEncoderNodes {
        VisualEncoderNodes {
            w_regions: reg.register(tape, format!("{prefix}.w_regions"), &self.w_regions),
            b_regions: reg.register(tape, format!("{prefix}.b_regions"), &self.b_regions),
            w_relations: reg.register(tape, format!("{prefix}.w_relations"), &self.w_relations),
            b_relations: reg.register(tape, format!("{prefix}.b_relations"), &self.b_relations),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VisualEncoderNodes {
    pub w_regions: NodeId,
    pub b_regions: NodeId,
    pub w_relations: NodeId,
    pub b_relations: NodeId,
}

/// Joint-space feature rows for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedVisual {
    /// `k x h`
    pub regions: Array,
    /// `m x h`; zero rows when the image has no relations
    pub relations: Array,
}

/// Projected rows still on a tape, for training graphs.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedNodes {
    pub regions: NodeId,
    /// `None` when the image has no relations.
    pub relations: Option<NodeId>,
}

/// Project raw rows `x` through `x W^T + b` per row, on the tape.
fn project_rows(
    tape: &mut Tape,
    rows: NodeId,
    weight: NodeId,
    bias: NodeId,
    what: &'static str,
    expected_dim: usize,
) -> Result<NodeId> {
    let got = tape.value(rows).shape()[1];
    if got != expected_dim {
        return Err(Error::DimMismatch {
            what,
            expected: expected_dim,
            got,
        });
    }
    let wt = tape.transpose(weight)?;
    let prod = tape.matmul(rows, wt)?; // rows x h
    let n = tape.value(prod).shape()[0];
    let bias_rows: Vec<NodeId> = (0..n).map(|_| bias).collect();
    let tiled = tape.stack_rows(&bias_rows)?;
    tape.add(prod, tiled)
}

/// Project one image's raw features on a tape.
pub fn project_on_tape(
    tape: &mut Tape,
    enc: &VisualEncoderNodes,
    features: &VisualFeatureSet,
) -> Result<ProjectedNodes> {
    let d_v = tape.value(enc.w_regions).shape()[1];
    let d_r = tape.value(enc.w_relations).shape()[1];
    let raw_regions = tape.constant(features.regions.clone());
    let regions = project_rows(tape, raw_regions, enc.w_regions, enc.b_regions, "region features", d_v)?;
    let relations = if features.relation_count() == 0 {
        if features.relation_dim() != d_r {
            return Err(Error::DimMismatch {
                what: "relation features",
                expected: d_r,
                got: features.relation_dim(),
            });
        }
        None
    } else {
        let raw = tape.constant(features.relations.clone());
        Some(project_rows(
            tape,
            raw,
            enc.w_relations,
            enc.b_relations,
            "relation features",
            d_r,
        )?)
    };
    Ok(ProjectedNodes { regions, relations })
}

/// Project one image's raw features to plain joint-space matrices.
pub fn project(features: &VisualFeatureSet, params: &VisualEncoderParams) -> Result<ProjectedVisual> {
    let mut tape = Tape::new();
    let mut reg = ParamBindings::new();
    let nodes = params.bind(&mut tape, &mut reg, "visenc");
    let projected = project_on_tape(&mut tape, &nodes, features)?;
    let regions = tape.value(projected.regions).clone();
    let relations = match projected.relations {
        Some(id) => tape.value(id).clone(),
        None => Array::zeros(&[0, params.joint_dim()]),
    };
    Ok(ProjectedVisual { regions, relations })
}

// ---------------------------------------------------------------------------
// Binary feature file format
//
// Per image, little-endian:
//   magic "RSGF" | version u32 | k u32 | d_v u32 | k*d_v f32 row-major
//   | m u32 | d_r u32 | m*d_r f32 | m x (subj u32, pred u32, obj u32, conf f32)
// The relation-label vocabulary lives in a sidecar text file, one label per
// line.
// ---------------------------------------------------------------------------

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

fn parse_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::FeatureParse {
        offset,
        reason: reason.into(),
    }
}

/// Write a feature set. Values are stored as f32; feature sets produced by
/// this crate hold f32-representable values, so write/read round-trips are
/// bit-exact.
pub fn save_features(features: &VisualFeatureSet, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(Error::io_at(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(FEATURE_MAGIC)?;
    w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
    w.write_u32::<LittleEndian>(features.region_count() as u32)?;
    w.write_u32::<LittleEndian>(features.region_dim() as u32)?;
    for &v in features.regions.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.write_u32::<LittleEndian>(features.relation_count() as u32)?;
    w.write_u32::<LittleEndian>(features.relation_dim() as u32)?;
    for &v in features.relations.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    for t in &features.triplets {
        w.write_u32::<LittleEndian>(t.subject)?;
        w.write_u32::<LittleEndian>(t.predicate)?;
        w.write_u32::<LittleEndian>(t.object)?;
        w.write_f32::<LittleEndian>(t.confidence)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a feature set, keeping at most `max_relations` highest-confidence
/// relations. The image id is taken from the file stem (`<id>.rsgf`).
pub fn load_features(path: &Path, max_relations: usize) -> Result<VisualFeatureSet> {
    let image_id = image_id_from_path(path)?;
    let file = std::fs::File::open(path).map_err(Error::io_at(path))?;
    let mut r = CountingReader {
        inner: BufReader::new(file),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| parse_err(0, "truncated before magic"))?;
    if &magic != FEATURE_MAGIC {
        return Err(parse_err(0, format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != FEATURE_VERSION {
        return Err(parse_err(4, format!("unsupported format version {version}")));
    }

    let k = read_u32(&mut r, "region count")? as usize;
    let d_v = read_u32(&mut r, "region dim")? as usize;
    if k == 0 || d_v == 0 {
        return Err(parse_err(r.offset, "region block must be non-empty"));
    }
    let regions = read_f32_matrix(&mut r, k, d_v)?;

    let m = read_u32(&mut r, "relation count")? as usize;
    let d_r = read_u32(&mut r, "relation dim")? as usize;
    if d_r == 0 {
        return Err(parse_err(r.offset, "relation dim must be positive"));
    }
    let relations = read_f32_matrix(&mut r, m, d_r)?;

    let mut triplets = Vec::with_capacity(m);
    for _ in 0..m {
        let subject = read_u32(&mut r, "triplet subject")?;
        let predicate = read_u32(&mut r, "triplet predicate")?;
        let object = read_u32(&mut r, "triplet object")?;
        let at = r.offset;
        let confidence = r
            .inner
            .read_f32::<LittleEndian>()
            .map_err(|_| parse_err(at, "truncated confidence"))?;
        r.offset += 4;
        if !confidence.is_finite() {
            return Err(parse_err(at, "non-finite confidence"));
        }
        triplets.push(RelationTriplet {
            subject,
            predicate,
            object,
            confidence,
        });
    }

    let mut set = VisualFeatureSet::new(image_id, regions, relations, triplets)?;
    set.truncate_relations(max_relations);
    Ok(set)
}

pub fn image_id_from_path(path: &Path) -> Result<u64> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    stem.parse::<u64>()
        .map_err(|_| parse_err(0, format!("file stem {stem:?} is not a numeric image id")))
}

pub fn feature_file_name(image_id: u64) -> String {
    format!("{image_id}.rsgf")
}

fn read_u32<R: Read>(r: &mut CountingReader<R>, what: &str) -> Result<u32> {
    let at = r.offset;
    let v = r
        .inner
        .read_u32::<LittleEndian>()
        .map_err(|_| parse_err(at, format!("truncated {what}")))?;
    r.offset += 4;
    Ok(v)
}

fn read_f32_matrix<R: Read>(r: &mut CountingReader<R>, rows: usize, cols: usize) -> Result<Array> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let at = r.offset;
        let v = r
            .inner
            .read_f32::<LittleEndian>()
            .map_err(|_| parse_err(at, "truncated feature payload"))?;
        r.offset += 4;
        if !v.is_finite() {
            return Err(parse_err(at, "non-finite feature value"));
        }
        data.push(v as f64);
    }
    if rows == 0 {
        return Ok(Array::zeros(&[0, cols]));
    }
    Array::from_vec(vec![rows, cols], data)
}

// ---------------------------------------------------------------------------
// Synthetic features
// ---------------------------------------------------------------------------

/// Targets to plant into generated feature rows so that retrieval against a
/// chosen embedding is learnable by construction.
#[derive(Debug, Clone, Default)]
pub struct PlantedAlignment {
    /// (region row, target vector in feature space)
    pub region_targets: Vec<(usize, Vec<f64>)>,
    /// (relation row, target vector in feature space)
    pub relation_targets: Vec<(usize, Vec<f64>)>,
    /// Standard deviation of Gaussian noise added to planted rows.
    pub noise: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub regions: usize,
    pub relations: usize,
    pub region_dim: usize,
    pub relation_dim: usize,
    pub label_count: u32,
}

/// Seeded Gaussian feature set, optionally with planted rows. All values are
/// rounded through f32 so that file round-trips stay bit-exact.
pub fn synth_features(
    seed: u64,
    image_id: u64,
    spec: SynthSpec,
    planted: Option<&PlantedAlignment>,
) -> VisualFeatureSet {
    let mut rng = crate::rng::substream_indexed(seed, "synth-features", image_id);
    let mut regions = Array::gaussian(&[spec.regions, spec.region_dim], &mut rng);
    let mut relations = if spec.relations > 0 {
        Array::gaussian(&[spec.relations, spec.relation_dim], &mut rng)
    } else {
        Array::zeros(&[0, spec.relation_dim])
    };
    if let Some(p) = planted {
        plant(&mut regions, &p.region_targets, p.noise, &mut rng);
        plant(&mut relations, &p.relation_targets, p.noise, &mut rng);
    }
    round_through_f32(&mut regions);
    round_through_f32(&mut relations);

    let triplets = (0..spec.relations)
        .map(|l| RelationTriplet {
            subject: rng.gen_range(0..spec.label_count.max(1)),
            predicate: rng.gen_range(0..spec.label_count.max(1)),
            object: rng.gen_range(0..spec.label_count.max(1)),
            // descending by construction
            confidence: 1.0 - (l as f32) / (spec.relations.max(1) as f32 + 1.0),
        })
        .collect();

    VisualFeatureSet::new(image_id, regions, relations, triplets)
        .expect("synthetic features satisfy invariants")
}

fn plant(rows: &mut Array, targets: &[(usize, Vec<f64>)], noise: f64, rng: &mut impl Rng) {
    let cols = rows.cols();
    let count = rows.rows();
    for (row, target) in targets {
        if *row >= count {
            continue;
        }
        debug_assert_eq!(target.len(), cols);
        let noise_row = Array::gaussian(&[cols], rng);
        for j in 0..cols {
            rows.data_mut()[row * cols + j] = target[j] + noise * noise_row.data()[j];
        }
    }
}

fn round_through_f32(a: &mut Array) {
    for v in a.data_mut() {
        *v = *v as f32 as f64;
    }
}

//! Training data: collision-filtered uniform configurations paired with
//! end-effector poses, normalization statistics, and the binary dataset file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::kinematics::{
    collides_with_frames, link_transforms_unchecked, sample_within, KinematicsError, Pose, RobotModel,
};

pub const DATASET_MAGIC: &[u8; 4] = b"IKDF";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

/// Draws used to decide whether the collision model admits enough samples.
const PROBE_DRAWS: u64 = 100_000;
/// Records used to fit the position normalization.
const STATS_RECORDS: usize = 10_000;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("count must be at least 1")]
    EmptyCount,
    #[error("infeasible collision model: {accepted} of {draws} draws were collision-free")]
    InfeasibleCollisionModel { accepted: u64, draws: u64 },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("truncated dataset file: {0}")]
    Truncated(String),
    #[error("dataset was generated for a different robot description")]
    RobotHashMismatch,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-robot normalization: joints map affinely onto `[-1, 1]`, positions are
/// centered and scaled by the workspace radius.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub q_lo: Vec<f64>,
    pub q_hi: Vec<f64>,
    pub pos_scale: f64,
    pub pos_center: [f64; 3],
}

impl NormStats {
    pub fn dof(&self) -> usize {
        self.q_lo.len()
    }

    pub fn normalize_q(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(self.q_lo.iter().zip(&self.q_hi))
            .map(|(&v, (&lo, &hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
            .collect()
    }

    pub fn denormalize_q(&self, qn: &[f64]) -> Vec<f64> {
        qn.iter()
            .zip(self.q_lo.iter().zip(&self.q_hi))
            .map(|(&v, (&lo, &hi))| lo + (v + 1.0) * (hi - lo) / 2.0)
            .collect()
    }

    /// `dq / dq_normalized` per joint, the diagonal of the normalization Jacobian.
    pub fn q_half_range(&self) -> Vec<f64> {
        self.q_lo
            .iter()
            .zip(&self.q_hi)
            .map(|(&lo, &hi)| (hi - lo) / 2.0)
            .collect()
    }

    /// Network input features for a pose: normalized position, canonical quaternion.
    pub fn pose_features(&self, pose: &Pose) -> [f64; 7] {
        let mut f = pose.to_features();
        for k in 0..3 {
            f[k] = (f[k] - self.pos_center[k]) / self.pos_scale;
        }
        f
    }

    pub(crate) fn encoded_len(&self) -> usize {
        (2 * self.dof() + 4) * 8
    }
}

/// Generated (q, poses) records stored as `f32`, one flat row per record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub robot_hash: [u8; 32],
    pub dof: usize,
    pub n_ee: usize,
    pub stats: NormStats,
    records: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationReport {
    pub draws: u64,
    pub accepted: u64,
}

impl GenerationReport {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.draws.max(1) as f64
    }
}

impl Dataset {
    pub fn stride(&self) -> usize {
        self.dof + 7 * self.n_ee
    }

    pub fn len(&self) -> usize {
        self.records.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn q(&self, i: usize) -> &[f32] {
        let s = self.stride();
        &self.records[i * s..i * s + self.dof]
    }

    /// `n_ee` consecutive `[x, y, z, w, qx, qy, qz]` blocks.
    pub fn poses(&self, i: usize) -> &[f32] {
        let s = self.stride();
        &self.records[i * s + self.dof..(i + 1) * s]
    }

    pub fn q_f64(&self, i: usize) -> Vec<f64> {
        self.q(i).iter().map(|&v| v as f64).collect()
    }

    pub fn pose_list(&self, i: usize) -> Vec<Pose> {
        self.poses(i)
            .chunks_exact(7)
            .map(|c| {
                let f: Vec<f64> = c.iter().map(|&v| v as f64).collect();
                Pose::from_features(&f)
            })
            .collect()
    }

    pub fn check_robot(&self, model: &RobotModel) -> Result<(), DatagenError> {
        if self.robot_hash != model.source_hash() || self.dof != model.dof() || self.n_ee != model.n_ee() {
            return Err(DatagenError::RobotHashMismatch);
        }
        Ok(())
    }

    /// Exact size in bytes of the file `save` writes.
    pub fn file_len(&self) -> usize {
        HEADER_LEN + self.stats.encoded_len() + self.records.len() * 4
    }
}

/// Rejection-samples `count` collision-free records.
///
/// Work is split into `workers` shards; shard `k` draws from a stream seeded
/// with `seed + k` and shards are concatenated in index order, so the output
/// depends only on `(seed, workers)`.
pub fn generate(
    model: &RobotModel,
    count: usize,
    seed: u64,
    workers: usize,
) -> Result<(Dataset, GenerationReport), DatagenError> {
    if count == 0 {
        return Err(DatagenError::EmptyCount);
    }
    let limits = model.limits()?;
    let workers = workers.clamp(1, count);
    let shards: Vec<Result<(Vec<f32>, u64), DatagenError>> = (0..workers)
        .into_par_iter()
        .map(|k| {
            let n = count / workers + usize::from(k < count % workers);
            generate_shard(model, &limits, n, seed.wrapping_add(k as u64))
        })
        .collect();

    let stride = model.dof() + 7 * model.n_ee();
    let mut records = Vec::with_capacity(count * stride);
    let mut draws = 0;
    for shard in shards {
        let (r, d) = shard?;
        records.extend_from_slice(&r);
        draws += d;
    }
    let stats = fit_stats(&limits, model.n_ee(), stride, model.dof(), &records);
    let dataset = Dataset {
        robot_hash: model.source_hash(),
        dof: model.dof(),
        n_ee: model.n_ee(),
        stats,
        records,
    };
    Ok((
        dataset,
        GenerationReport {
            draws,
            accepted: count as u64,
        },
    ))
}

fn generate_shard(
    model: &RobotModel,
    limits: &[(f64, f64)],
    n: usize,
    seed: u64,
) -> Result<(Vec<f32>, u64), DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = model.dof() + 7 * model.n_ee();
    let mut out = Vec::with_capacity(n * stride);
    let mut draws = 0u64;
    let mut accepted = 0u64;
    while (accepted as usize) < n {
        draws += 1;
        let q = quantize_within(&sample_within(limits, &mut rng), limits);
        let frames = link_transforms_unchecked(model, &q);
        if collides_with_frames(model, &frames) {
            if draws >= PROBE_DRAWS && accepted * 1000 < draws {
                return Err(DatagenError::InfeasibleCollisionModel { accepted, draws });
            }
            continue;
        }
        accepted += 1;
        out.extend(q.iter().map(|&v| v as f32));
        for &l in model.end_effectors() {
            let pose = Pose::from_isometry(&frames[l]);
            out.extend(pose.to_features().iter().map(|&v| v as f32));
        }
    }
    Ok((out, draws))
}

/// Rounds to `f32` precision without leaving the joint limits, so stored
/// configurations and their poses describe the same point.
fn quantize_within(q: &[f64], limits: &[(f64, f64)]) -> Vec<f64> {
    q.iter()
        .zip(limits)
        .map(|(&v, &(lo, hi))| {
            let mut r = v as f32;
            if (r as f64) > hi {
                r = r.next_down();
            }
            if (r as f64) < lo {
                r = r.next_up();
            }
            r as f64
        })
        .collect()
}

fn fit_stats(limits: &[(f64, f64)], n_ee: usize, stride: usize, dof: usize, records: &[f32]) -> NormStats {
    let n = (records.len() / stride).min(STATS_RECORDS);
    let positions: Vec<[f64; 3]> = (0..n)
        .flat_map(|i| {
            let rec = &records[i * stride + dof..(i + 1) * stride];
            (0..n_ee).map(move |e| {
                let p = &rec[e * 7..e * 7 + 3];
                [p[0] as f64, p[1] as f64, p[2] as f64]
            })
        })
        .collect();
    let mut center = [0.0; 3];
    for p in &positions {
        for k in 0..3 {
            center[k] += p[k];
        }
    }
    for c in &mut center {
        *c /= positions.len() as f64;
    }
    let max_dist = positions
        .iter()
        .map(|p| ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    NormStats {
        q_lo: limits.iter().map(|l| l.0).collect(),
        q_hi: limits.iter().map(|l| l.1).collect(),
        pos_scale: if max_dist > 0.0 { max_dist * 1.1 } else { 1.0 },
        pos_center: center,
    }
}

/// Writes the little-endian dataset file.
pub fn save(dataset: &Dataset, path: &Path) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_header(dataset))?;
    for v in dataset.stats.q_lo.iter().chain(&dataset.stats.q_hi) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&dataset.stats.pos_scale.to_le_bytes())?;
    for v in dataset.stats.pos_center {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(dataset.records.len() * 4);
    for v in &dataset.records {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn encode_header(d: &Dataset) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(DATASET_MAGIC);
    h[4..8].copy_from_slice(&DATASET_VERSION.to_le_bytes());
    h[8..12].copy_from_slice(&(d.dof as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(d.n_ee as u32).to_le_bytes());
    h[16..24].copy_from_slice(&(d.len() as u64).to_le_bytes());
    h[24..56].copy_from_slice(&d.robot_hash);
    h
}

pub fn load(path: &Path) -> Result<Dataset, DatagenError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Dataset, DatagenError> {
    if bytes.len() < 4 || &bytes[0..4] != DATASET_MAGIC {
        return Err(DatagenError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DatagenError::Truncated("header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != DATASET_VERSION {
        return Err(DatagenError::Version(version));
    }
    let dof = u32_at(8) as usize;
    let n_ee = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let mut robot_hash = [0u8; 32];
    robot_hash.copy_from_slice(&bytes[24..56]);

    let stats_len = (2 * dof + 4) * 8;
    let stride = dof + 7 * n_ee;
    let expected = count
        .checked_mul(stride * 4)
        .and_then(|r| r.checked_add(HEADER_LEN + stats_len))
        .ok_or_else(|| DatagenError::Truncated("record count overflows".into()))?;
    if bytes.len() < expected {
        return Err(DatagenError::Truncated(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut off = HEADER_LEN;
    let mut next_f64 = || {
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    let q_lo: Vec<f64> = (0..dof).map(|_| next_f64()).collect();
    let q_hi: Vec<f64> = (0..dof).map(|_| next_f64()).collect();
    let pos_scale = next_f64();
    let pos_center = [next_f64(), next_f64(), next_f64()];
    let start = HEADER_LEN + stats_len;
    let records = bytes[start..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Dataset {
        robot_hash,
        dof,
        n_ee,
        stats: NormStats {
            q_lo,
            q_hi,
            pos_scale,
            pos_center,
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::kinematics::{forward_kinematics, parse_robot, self_collides};

    fn two_r() -> RobotModel {
        parse_robot(&fixtures::planar_chain(2, 1.0, std::f64::consts::PI)).unwrap()
    }

    #[test]
    fn no_spheres_means_no_rejections() {
        let (d, rep) = generate(&two_r(), 1000, 3, 1).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(rep.draws, 1000);
    }

    #[test]
    fn folded_chain_acceptance_near_half() {
        let model = parse_robot(fixtures::FOLDED_3R).unwrap();
        let (_, rep) = generate(&model, 5000, 11, 1).unwrap();
        let rate = rep.acceptance_rate();
        assert!((0.4..=0.6).contains(&rate), "acceptance {rate}");
    }

    #[test]
    fn normalization_endpoints() {
        let stats = NormStats {
            q_lo: vec![-1.0, 0.5],
            q_hi: vec![3.0, 2.5],
            pos_scale: 1.0,
            pos_center: [0.0; 3],
        };
        assert_eq!(stats.normalize_q(&[-1.0, 0.5]), vec![-1.0, -1.0]);
        assert_eq!(stats.normalize_q(&[1.0, 1.5]), vec![0.0, 0.0]);
        assert_eq!(stats.normalize_q(&[3.0, 2.5]), vec![1.0, 1.0]);
    }

    #[test]
    fn stored_records_are_consistent() {
        let model = parse_robot(fixtures::DUAL_WAIST).unwrap();
        let (d, _) = generate(&model, 300, 5, 2).unwrap();
        for i in 0..d.len() {
            let q = d.q_f64(i);
            assert!(!self_collides(&model, &q).unwrap());
            let fk = forward_kinematics(&model, &q).unwrap();
            for (a, b) in fk.iter().zip(d.pose_list(i)) {
                assert!((a.position - b.position).norm() < 1e-6);
                assert!(a.angle_to(&b) < 1e-3);
            }
            let qn = d.stats.normalize_q(&q);
            assert!(qn.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (d, _) = generate(&two_r(), 10, 1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ikdf");
        save(&d, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(DatagenError::Truncated(_))
        ));
        assert!(matches!(decode(&bytes[..30]), Err(DatagenError::Truncated(_))));
    }
}

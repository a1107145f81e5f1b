//! Per-block checkpoint storage and candidate-epoch sampling.
//!
//! On-disk layout of a store directory:
//!
//! ```text
//! manifest        "PCS1" | version u32 | arch digest [u8; 32] | T_train u32 | K u32 | epochs u32[K]
//! b<i>_c<k>.w     rank u32 | dims u32[rank] | f32 payload, row-major
//! ```
//!
//! All integers and floats are little-endian. A block is stored as one
//! `[fan_out, fan_in + 1]` tensor whose last column is the bias. Files are
//! written to a temporary name and renamed into place, and the manifest is
//! written last, so a reader that finds a manifest sees a complete store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2};
use rand::seq::index;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Architecture, Block, BlockwiseModel, CheckpointSink, EpochRecord};
use crate::seed::derive_rng;

pub const MAGIC: &[u8; 4] = b"PCS1";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";

pub fn blob_file_name(block: usize, candidate: usize) -> String {
    format!("b{block}_c{candidate}.w")
}

/// Encodes an f32 tensor with its shape header.
pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = dims.iter().product();
    if expected != data.len() {
        return Err(Error::DimensionMismatch { expected, got: data.len() });
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let chunk = bytes
        .get(*at..*at + 4)
        .ok_or_else(|| Error::Format("truncated data".into()))?;
    *at += 4;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
}

/// Inverse of [`encode_tensor`].
pub fn decode_tensor(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut at = 0;
    let rank = read_u32(bytes, &mut at)? as usize;
    let dims = (0..rank)
        .map(|_| read_u32(bytes, &mut at).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = dims.iter().product();
    let payload = &bytes[at..];
    if payload.len() != 4 * count {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape needs {}",
            payload.len(),
            4 * count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

/// Block as a `[fan_out, fan_in + 1]` f32 tensor.
pub fn block_to_tensor(b: &Block) -> (Vec<usize>, Vec<f32>) {
    let (fan_in, fan_out) = b.shape();
    let mut data = Vec::with_capacity(fan_out * (fan_in + 1));
    for (row, &bias) in b.weights.outer_iter().zip(b.bias.iter()) {
        data.extend(row.iter().map(|&w| w as f32));
        data.push(bias as f32);
    }
    (vec![fan_out, fan_in + 1], data)
}

pub fn tensor_to_block(dims: &[usize], data: &[f32]) -> Result<Block> {
    if dims.len() != 2 || dims[1] == 0 {
        return Err(Error::Format(format!("block tensor has shape {dims:?}")));
    }
    let full = Array2::from_shape_vec((dims[0], dims[1]), data.iter().map(|&v| f64::from(v)).collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    let fan_in = dims[1] - 1;
    Ok(Block {
        weights: full.slice(s![.., ..fan_in]).to_owned(),
        bias: Array1::from(full.column(fan_in).to_vec()),
    })
}

/// A block after a trip through f32 storage.
pub fn round_to_stored(b: &Block) -> Block {
    let (dims, data) = block_to_tensor(b);
    tensor_to_block(&dims, &data).expect("shape produced by block_to_tensor")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub arch_digest: [u8; 32],
    pub t_train: usize,
    pub epochs: Vec<usize>,
}

impl Manifest {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch_digest);
        out.extend_from_slice(&(self.t_train as u32).to_le_bytes());
        out.extend_from_slice(&(self.epochs.len() as u32).to_le_bytes());
        for &e in &self.epochs {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad manifest magic".into()));
        }
        let mut at = 4;
        let version = read_u32(bytes, &mut at)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {version}")));
        }
        let arch_digest: [u8; 32] = bytes
            .get(at..at + 32)
            .ok_or_else(|| Error::Format("truncated manifest".into()))?
            .try_into()
            .expect("32 bytes");
        at += 32;
        let t_train = read_u32(bytes, &mut at)? as usize;
        let k = read_u32(bytes, &mut at)? as usize;
        let epochs = (0..k)
            .map(|_| read_u32(bytes, &mut at).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if at != bytes.len() {
            return Err(Error::Format("trailing bytes after manifest".into()));
        }
        validate_epochs(&epochs, t_train)?;
        Ok(Self { arch_digest, t_train, epochs })
    }
}

fn validate_epochs(epochs: &[usize], t_train: usize) -> Result<()> {
    if epochs.is_empty() {
        return Err(Error::invalid("candidate epoch set is empty"));
    }
    if epochs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("candidate epochs must be sorted and distinct"));
    }
    if epochs[0] < 1 || *epochs.last().unwrap() > t_train {
        return Err(Error::invalid(format!("candidate epochs must lie in [1, {t_train}]")));
    }
    Ok(())
}

/// Read access to per-block candidates.
pub trait BlockSource: Sync {
    fn architecture(&self) -> &Architecture;
    /// Sorted candidate epochs; candidate `k` is `candidate_epochs()[k]`.
    fn candidate_epochs(&self) -> &[usize];
    fn block(&self, block: usize, candidate: usize) -> Result<Block>;

    fn n_candidates(&self) -> usize {
        self.candidate_epochs().len()
    }

    /// Candidate index holding `epoch`, if stored.
    fn candidate_of(&self, epoch: usize) -> Option<usize> {
        self.candidate_epochs().binary_search(&epoch).ok()
    }
}

/// Writes a store; the single writer during training.
#[derive(Debug)]
pub struct CheckpointWriter {
    dir: PathBuf,
    arch: Architecture,
    manifest: Manifest,
    written: Vec<Vec<bool>>,
    sealed: bool,
}

impl CheckpointWriter {
    pub fn create(dir: impl Into<PathBuf>, arch: &Architecture, t_train: usize, epochs: &[usize]) -> Result<Self> {
        arch.validate()?;
        validate_epochs(epochs, t_train)?;
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            written: vec![vec![false; epochs.len()]; arch.n_blocks()],
            manifest: Manifest { arch_digest: arch.digest(), t_train, epochs: epochs.to_vec() },
            arch: arch.clone(),
            dir,
            sealed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn put_block(&mut self, block: usize, candidate: usize, weights: &Block) -> Result<()> {
        if self.sealed {
            return Err(Error::SealedStore);
        }
        if block >= self.arch.n_blocks() || candidate >= self.manifest.epochs.len() {
            return Err(Error::IndexOutOfRange(format!("slot (block {block}, candidate {candidate})")));
        }
        if self.written[block][candidate] {
            return Err(Error::DuplicateWrite { block, candidate });
        }
        let (fan_in, fan_out) = self.arch.block_shape(block);
        if weights.shape() != (fan_in, fan_out) {
            return Err(Error::Format(format!("block {block} has the wrong shape")));
        }
        let (dims, data) = block_to_tensor(weights);
        write_atomic(&self.dir.join(blob_file_name(block, candidate)), &encode_tensor(&dims, &data)?)?;
        self.written[block][candidate] = true;
        Ok(())
    }

    pub fn put_model(&mut self, candidate: usize, m: &BlockwiseModel) -> Result<()> {
        for (i, b) in m.blocks.iter().enumerate() {
            self.put_block(i, candidate, b)?;
        }
        Ok(())
    }

    /// Checks every slot is present, writes the manifest, and reopens the
    /// store for reading.
    pub fn seal(mut self) -> Result<CheckpointStore> {
        for (block, row) in self.written.iter().enumerate() {
            if let Some(candidate) = row.iter().position(|w| !w) {
                return Err(Error::MissingCheckpoint { block, candidate });
            }
        }
        write_atomic(&self.dir.join(MANIFEST_FILE), &self.manifest.encode())?;
        self.sealed = true;
        CheckpointStore::open(&self.dir, &self.arch)
    }
}

impl CheckpointSink for CheckpointWriter {
    fn on_epoch_end(&mut self, epoch: usize, model: &BlockwiseModel, _: &EpochRecord) -> Result<bool> {
        match self.manifest.epochs.binary_search(&epoch) {
            Ok(k) => self.put_model(k, model).map(|_| true),
            Err(_) => Ok(false),
        }
    }
}

/// A sealed, read-only store on disk. Blocks are read on demand.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    dir: PathBuf,
    arch: Architecture,
    manifest: Manifest,
}

impl CheckpointStore {
    pub fn open(dir: impl Into<PathBuf>, arch: &Architecture) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingManifest(dir));
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::decode(&bytes)?;
        if manifest.arch_digest != arch.digest() {
            return Err(Error::Format("architecture digest does not match the store".into()));
        }
        Ok(Self { dir, arch: arch.clone(), manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn t_train(&self) -> usize {
        self.manifest.t_train
    }

    pub fn get_block(&self, block: usize, candidate: usize) -> Result<Block> {
        if block >= self.arch.n_blocks() || candidate >= self.manifest.epochs.len() {
            return Err(Error::MissingCheckpoint { block, candidate });
        }
        let path = self.dir.join(blob_file_name(block, candidate));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingCheckpoint { block, candidate })
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        let (dims, data) = decode_tensor(&bytes)?;
        let b = tensor_to_block(&dims, &data)?;
        if b.shape() != self.arch.block_shape(block) {
            return Err(Error::Format(format!("stored block {block} has the wrong shape")));
        }
        Ok(b)
    }
}

impl BlockSource for CheckpointStore {
    fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn candidate_epochs(&self) -> &[usize] {
        &self.manifest.epochs
    }

    fn block(&self, block: usize, candidate: usize) -> Result<Block> {
        self.get_block(block, candidate)
    }
}

/// All candidates held in memory, already rounded through f32 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    arch: Architecture,
    t_train: usize,
    epochs: Vec<usize>,
    /// `blocks[k][i]`: block `i` of candidate `k`.
    blocks: Vec<Vec<Block>>,
}

impl CandidatePool {
    pub fn load(store: &CheckpointStore) -> Result<Self> {
        let blocks = (0..store.n_candidates())
            .map(|k| (0..store.arch.n_blocks()).map(|i| store.get_block(i, k)).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch: store.arch.clone(),
            t_train: store.t_train(),
            epochs: store.candidate_epochs().to_vec(),
            blocks,
        })
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    /// Writes this pool as a sealed store under `dir`.
    pub fn persist(&self, dir: impl Into<PathBuf>) -> Result<CheckpointStore> {
        let mut w = CheckpointWriter::create(dir, &self.arch, self.t_train, &self.epochs)?;
        for (k, blocks) in self.blocks.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                w.put_block(i, k, b)?;
            }
        }
        w.seal()
    }
}

impl BlockSource for CandidatePool {
    fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn candidate_epochs(&self) -> &[usize] {
        &self.epochs
    }

    fn block(&self, block: usize, candidate: usize) -> Result<Block> {
        self.blocks
            .get(candidate)
            .and_then(|c| c.get(block))
            .cloned()
            .ok_or(Error::MissingCheckpoint { block, candidate })
    }
}

/// In-memory training sink: keeps the sampled epochs, the final epoch, and
/// the running best model by validation loss, error and ECE (earliest epoch
/// on ties), so early-stopping points are always available as candidates.
#[derive(Debug)]
pub struct SnapshotCollector {
    sampled: Vec<usize>,
    t_train: usize,
    snapshots: BTreeMap<usize, Vec<Block>>,
    best: [Option<(f64, usize, Vec<Block>)>; 3],
}

impl SnapshotCollector {
    pub fn new(sampled: &[usize], t_train: usize) -> Result<Self> {
        validate_epochs(sampled, t_train)?;
        Ok(Self { sampled: sampled.to_vec(), t_train, snapshots: BTreeMap::new(), best: [None, None, None] })
    }

    /// Seals into a pool over the sampled epochs plus every tracked epoch.
    pub fn finish(self, arch: &Architecture) -> Result<CandidatePool> {
        let mut snapshots = self.snapshots;
        for (_, epoch, blocks) in self.best.into_iter().flatten() {
            snapshots.entry(epoch).or_insert(blocks);
        }
        if !snapshots.contains_key(&self.t_train) {
            return Err(Error::MissingCheckpoint { block: 0, candidate: self.t_train });
        }
        let epochs: Vec<usize> = snapshots.keys().copied().collect();
        Ok(CandidatePool {
            arch: arch.clone(),
            t_train: self.t_train,
            epochs,
            blocks: snapshots.into_values().collect(),
        })
    }
}

impl CheckpointSink for SnapshotCollector {
    fn on_epoch_end(&mut self, epoch: usize, model: &BlockwiseModel, record: &EpochRecord) -> Result<bool> {
        let stored = || model.blocks.iter().map(round_to_stored).collect::<Vec<_>>();
        let keys = [record.val_loss, record.val_error, record.val_ece];
        for (slot, key) in self.best.iter_mut().zip(keys) {
            if slot.as_ref().is_none_or(|(best, _, _)| key < *best) {
                *slot = Some((key, epoch, stored()));
            }
        }
        if epoch == self.t_train || self.sampled.binary_search(&epoch).is_ok() {
            self.snapshots.insert(epoch, stored());
            return Ok(true);
        }
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingVariant {
    Full,
    Random,
    Uniform,
    Laplace,
    PiecewiseLaplace,
}

/// How the `K` candidate epochs are picked out of `1..=T_train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingStrategy {
    pub variant: SamplingVariant,
    /// Laplace scale; `T_train / 10` when absent.
    #[serde(default)]
    pub scale: Option<f64>,
    /// Extra Laplace centres for the piecewise variant (learning-rate drops).
    #[serde(default)]
    pub schedule_points: Vec<usize>,
}

impl SamplingStrategy {
    pub fn new(variant: SamplingVariant) -> Self {
        Self { variant, scale: None, schedule_points: Vec::new() }
    }
}

/// `K` distinct sorted epochs in `[1, T_train]`.
pub fn sample_epochs(strategy: &SamplingStrategy, k: usize, t_train: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > t_train {
        return Err(Error::invalid(format!("cannot sample {k} epochs out of {t_train}")));
    }
    let scale = strategy.scale.unwrap_or(t_train as f64 / 10.0);
    if matches!(strategy.variant, SamplingVariant::Laplace | SamplingVariant::PiecewiseLaplace) && !(scale > 0.0) {
        return Err(Error::invalid("Laplace scale must be positive"));
    }
    let mut rng = derive_rng(seed, "sample-epochs", 0);
    let mut out = match strategy.variant {
        SamplingVariant::Full => {
            if k != t_train {
                return Err(Error::invalid("full sampling needs K = T_train"));
            }
            (1..=t_train).collect()
        }
        SamplingVariant::Random => index::sample(&mut rng, t_train, k).into_iter().map(|e| e + 1).collect(),
        SamplingVariant::Uniform => {
            let mut out: Vec<usize> = Vec::with_capacity(k);
            for j in 1..=k {
                // round(j * T / K), half away from zero, in integers.
                let mut e = (2 * j * t_train + k) / (2 * k);
                if let Some(&prev) = out.last() {
                    e = e.max(prev + 1);
                }
                out.push(e.clamp(1, t_train));
            }
            out
        }
        SamplingVariant::Laplace | SamplingVariant::PiecewiseLaplace => {
            let mut centers = vec![0usize];
            if strategy.variant == SamplingVariant::PiecewiseLaplace {
                centers.extend(strategy.schedule_points.iter().copied().filter(|&c| c > 0 && c < t_train));
            }
            let tail = Exp::new(1.0 / scale).map_err(|e| Error::invalid(e.to_string()))?;
            let mut picked = std::collections::BTreeSet::new();
            let mut draws = 0usize;
            while picked.len() < k && draws < 10_000 * k {
                let c = centers[draws % centers.len()] as f64;
                let magnitude = tail.sample(&mut rng);
                // Centre 0 folds onto the positive side; other centres spread both ways.
                let x = if c == 0.0 || rand::Rng::random_bool(&mut rng, 0.5) { c + magnitude } else { c - magnitude };
                let e = (x.round().max(1.0) as usize).min(t_train);
                picked.insert(e);
                draws += 1;
            }
            // Pathological settings only: top up with the earliest free epochs.
            let mut e = 1;
            while picked.len() < k {
                picked.insert(e);
                e += 1;
            }
            picked.into_iter().collect()
        }
    };
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::init_model;

    fn arch() -> Architecture {
        Architecture::uniform(2, 3, 2, 5).unwrap()
    }

    #[test]
    fn uniform_and_full_examples() {
        let u = sample_epochs(&SamplingStrategy::new(SamplingVariant::Uniform), 5, 350, 0).unwrap();
        assert_eq!(u, vec![70, 140, 210, 280, 350]);
        let f = sample_epochs(&SamplingStrategy::new(SamplingVariant::Full), 10, 10, 0).unwrap();
        assert_eq!(f, (1..=10).collect::<Vec<_>>());
        assert!(sample_epochs(&SamplingStrategy::new(SamplingVariant::Full), 5, 10, 0).is_err());
        assert!(sample_epochs(&SamplingStrategy::new(SamplingVariant::Random), 11, 10, 0).is_err());
        let u7 = sample_epochs(&SamplingStrategy::new(SamplingVariant::Uniform), 7, 7, 3).unwrap();
        assert_eq!(u7, (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn random_is_distinct_and_seeded() {
        let s = SamplingStrategy::new(SamplingVariant::Random);
        let a = sample_epochs(&s, 50, 350, 4).unwrap();
        assert_eq!(a.len(), 50);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&e| (1..=350).contains(&e)));
        assert_eq!(a, sample_epochs(&s, 50, 350, 4).unwrap());
    }

    #[test]
    fn laplace_concentrates_early() {
        let t = 200;
        let s = SamplingStrategy::new(SamplingVariant::Laplace);
        let mut all: Vec<usize> = (0..1000).flat_map(|seed| sample_epochs(&s, 5, t, seed).unwrap()).collect();
        all.sort_unstable();
        assert!(all[all.len() / 2] < t / 2);
        let p = SamplingStrategy {
            variant: SamplingVariant::PiecewiseLaplace,
            scale: Some(5.0),
            schedule_points: vec![150, 250],
        };
        let e = sample_epochs(&p, 30, 350, 2).unwrap();
        assert_eq!(e.len(), 30);
        assert!(e.iter().any(|&x| x > 140 && x < 170));
        assert!(e.iter().any(|&x| x > 240 && x < 270));
        let all = sample_epochs(&SamplingStrategy::new(SamplingVariant::Laplace), 20, 20, 1).unwrap();
        assert_eq!(all, (1..=20).collect::<Vec<_>>());
    }

    #[test]
    fn tensor_codec_layout() {
        let bytes = encode_tensor(&[1, 2], &[1.5, -2.0]).unwrap();
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.5f32.to_le_bytes());
        assert_eq!(decode_tensor(&bytes).unwrap(), (vec![1, 2], vec![1.5, -2.0]));
        assert!(decode_tensor(&bytes[..15]).is_err());
        assert!(encode_tensor(&[2, 2], &[1.0]).is_err());
    }

    #[test]
    fn write_read_and_contract_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = arch();
        let m = init_model(&a, 3).unwrap();
        let mut w = CheckpointWriter::create(dir.path(), &a, 10, &[2, 5]).unwrap();
        w.put_model(0, &m).unwrap();
        assert!(matches!(w.put_block(0, 0, &m.blocks[0]), Err(Error::DuplicateWrite { block: 0, candidate: 0 })));
        assert!(matches!(w.put_block(9, 0, &m.blocks[0]), Err(Error::IndexOutOfRange(_))));
        // Not every slot is written yet.
        let dir2 = tempfile::tempdir().unwrap();
        let mut partial = CheckpointWriter::create(dir2.path(), &a, 10, &[2, 5]).unwrap();
        partial.put_model(0, &m).unwrap();
        assert!(matches!(partial.seal(), Err(Error::MissingCheckpoint { block: 0, candidate: 1 })));

        w.put_model(1, &m).unwrap();
        let store = w.seal().unwrap();
        for (i, b) in m.blocks.iter().enumerate() {
            assert_eq!(store.get_block(i, 1).unwrap(), round_to_stored(b));
        }
        assert!(matches!(store.get_block(0, 7), Err(Error::MissingCheckpoint { .. })));
        let other = Architecture::uniform(2, 3, 2, 6).unwrap();
        assert!(matches!(CheckpointStore::open(dir.path(), &other), Err(Error::Format(_))));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(CheckpointStore::open(empty.path(), &a), Err(Error::MissingManifest(_))));
    }

    #[test]
    fn sealed_writer_rejects_writes() {
        let dir = tempfile::tempdir().unwrap();
        let a = arch();
        let m = init_model(&a, 3).unwrap();
        let mut w = CheckpointWriter::create(dir.path(), &a, 3, &[3]).unwrap();
        w.put_model(0, &m).unwrap();
        w.sealed = true;
        assert!(matches!(w.put_block(0, 0, &m.blocks[0]), Err(Error::SealedStore)));
    }

    #[test]
    fn concurrent_reads_agree() {
        let dir = tempfile::tempdir().unwrap();
        let a = arch();
        let m = init_model(&a, 8).unwrap();
        let mut w = CheckpointWriter::create(dir.path(), &a, 1, &[1]).unwrap();
        w.put_model(0, &m).unwrap();
        let store = w.seal().unwrap();
        let (x, y) = std::thread::scope(|s| {
            let h1 = s.spawn(|| store.get_block(1, 0).unwrap());
            let h2 = s.spawn(|| store.get_block(1, 0).unwrap());
            (h1.join().unwrap(), h2.join().unwrap())
        });
        assert_eq!(x, y);
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest { arch_digest: [7; 32], t_train: 60, epochs: vec![3, 9, 60] };
        assert_eq!(Manifest::decode(&m.encode()).unwrap(), m);
        let mut bad = m.encode();
        bad[0] = b'X';
        assert!(Manifest::decode(&bad).is_err());
    }
}

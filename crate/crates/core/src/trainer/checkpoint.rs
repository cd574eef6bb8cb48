//! Binary checkpoint container.
//!
//! ```text
//! "GHLCKPT1"
//! u32 LE  metadata length, then that many bytes of UTF-8 JSON
//!         {config, epoch, shuffle_rng, augment_rng, network}
//! u32 LE  number of weight tensors
//! per tensor:
//!   u32 LE layer index
//!   u32 LE rank, then rank × u64 LE extents
//!   f64 LE values, row-major
//! ```
//!
//! All weights and RNG positions are stored exactly, so resuming continues
//! the original trajectory bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autodiff::Network;
use crate::error::{Error, Result};
use crate::layers::NetworkSpec;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GHLCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub shuffle_rng: RngState,
    pub augment_rng: RngState,
    pub network: Network,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: TrainConfig,
    epoch: usize,
    shuffle_rng: RngState,
    augment_rng: RngState,
    network: NetworkSpec,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Metadata {
            config: self.config.clone(),
            epoch: self.epoch,
            shuffle_rng: self.shuffle_rng,
            augment_rng: self.augment_rng,
            network: self.network.spec().clone(),
        })
        .map_err(|e| Error::State(format!("cannot encode checkpoint metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let tensors: Vec<(usize, &Tensor)> = self
            .network
            .weights()
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.as_ref().map(|w| (i, w)))
            .collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (layer, t) in tensors {
            out.extend_from_slice(&(layer as u32).to_le_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let meta_len = r.u32()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format(path, format!("bad metadata: {e}")))?;
        let mut weights: Vec<Option<Tensor>> = vec![None; meta.network.layers.len()];
        for _ in 0..r.u32()? {
            let layer = r.u32()? as usize;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let slot = weights
                .get_mut(layer)
                .ok_or_else(|| Error::format(path, format!("tensor for nonexistent layer {layer}")))?;
            *slot = Some(Tensor::new(shape, data)?);
        }
        if r.at != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self {
            config: meta.config,
            epoch: meta.epoch,
            shuffle_rng: meta.shuffle_rng,
            augment_rng: meta.augment_rng,
            network: Network::new(meta.network, weights)?,
        })
    }

    /// Write via a temporary sibling file and rename, so a crash never
    /// leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::io(
                self.path,
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "checkpoint truncated"),
            )
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::trainer::{init_network, TrainConfig};

    fn sample() -> Checkpoint {
        let cfg = TrainConfig::named("blobs_ghl").unwrap();
        let spec = cfg.arch.resolve(&[16], 3).unwrap();
        let mut rng = SeededRng::new(5);
        rng.next_u64();
        Checkpoint {
            config: cfg,
            epoch: 3,
            shuffle_rng: rng.state(),
            augment_rng: SeededRng::new(6).state(),
            network: init_network(&spec, 9).unwrap(),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"GHLCKPT1");
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[12..12 + meta_len]).unwrap();
        assert_eq!(meta["epoch"], 3);
        assert_eq!(meta["config"]["rule"], "ghl");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let p = Path::new("x");
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Io { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long, p), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(!path.with_extension("tmp").exists());
    }
}

//! Bank snapshots: slot templates go into the checkpoint container, the
//! bookkeeping (frame indices, pinned flags, policy kind) into a JSON
//! sidecar next to it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::memory::{MemoryBank, PolicyKind, SlotEntry};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankSidecar {
    pub policy: String,
    pub capacity: usize,
    pub frame_indices: Vec<usize>,
    pub pinned: Vec<bool>,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    let mut p = container.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_bank<T: Scalar>(bank: &MemoryBank<T>, policy: PolicyKind, path: &Path) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    for (i, slot) in bank.slots().iter().enumerate() {
        ckpt.insert_tensor(&format!("slot.{}", i), &slot.template.detached())?;
    }
    ckpt.save(path)?;
    let sidecar = BankSidecar {
        policy: policy.name().to_string(),
        capacity: bank.capacity(),
        frame_indices: bank.frame_indices(),
        pinned: bank.slots().iter().map(|s| s.pinned).collect(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::State(format!("sidecar encode: {}", e)))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn load_bank<T: Scalar>(path: &Path) -> Result<(MemoryBank<T>, BankSidecar)> {
    let ckpt = Checkpoint::load(path)?;
    let json = std::fs::read_to_string(sidecar_path(path))?;
    let sidecar: BankSidecar =
        serde_json::from_str(&json).map_err(|e| Error::State(format!("sidecar decode: {}", e)))?;
    if sidecar.frame_indices.len() != ckpt.len() || sidecar.pinned.len() != ckpt.len() {
        return Err(Error::Checkpoint(format!(
            "sidecar lists {} slots, container has {}",
            sidecar.frame_indices.len(),
            ckpt.len()
        )));
    }
    let mut bank = MemoryBank::new(sidecar.capacity)?;
    for i in 0..ckpt.len() {
        let template = ckpt.tensor::<T>(&format!("slot.{}", i))?;
        let mut entry = SlotEntry::new(template, sidecar.frame_indices[i]);
        entry.pinned = sidecar.pinned[i];
        bank.push(entry)?;
    }
    Ok((bank, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn snapshot_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.strm");

        let mut bank = MemoryBank::<f32>::new(4).unwrap();
        let mut first = SlotEntry::new(Tensor::from_fn(&[2, 2, 2], |i| i as f32 * 0.5), 0);
        first.pinned = true;
        bank.push(first).unwrap();
        bank.push(SlotEntry::new(Tensor::from_fn(&[2, 2, 2], |i| -(i as f32)), 7)).unwrap();

        save_bank(&bank, PolicyKind::Learned, &path).unwrap();
        let (back, sidecar) = load_bank::<f32>(&path).unwrap();

        assert_eq!(sidecar.policy, "learned");
        assert_eq!(back.capacity(), 4);
        assert_eq!(back.frame_indices(), vec![0, 7]);
        assert!(back.slot(0).pinned);
        assert!(back.slot(0).template.bit_eq(&bank.slot(0).template));
        assert!(back.slot(1).template.bit_eq(&bank.slot(1).template));
    }
}

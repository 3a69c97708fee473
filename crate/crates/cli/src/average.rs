//! Checkpoint weight averaging with an SSIM-threshold selector.

use std::path::PathBuf;

use stremn_core::checkpoint::{Checkpoint, Record};
use stremn_core::Dtype;

use crate::error::{Error, Result};

const VALIDATION_SSIM_KEY: &str = "meta.validation_ssim";

/// Arithmetic mean per parameter over the checkpoints whose recorded
/// validation SSIM clears `min_ssim` (checkpoints without the record count
/// as SSIM 0). All candidates must share one manifest.
pub fn average_checkpoints(paths: &[PathBuf], min_ssim: f64) -> Result<Checkpoint> {
    if paths.len() < 2 {
        return Err(Error::Contract(format!(
            "averaging needs at least 2 checkpoints, got {}",
            paths.len()
        )));
    }
    let loaded: Vec<(PathBuf, Checkpoint)> = paths
        .iter()
        .map(|p| Ok((p.clone(), Checkpoint::load(p)?)))
        .collect::<Result<_>>()?;

    let reference = &loaded[0].1;
    for (path, ckpt) in &loaded[1..] {
        let diffs = manifest_diff(reference, ckpt);
        if !diffs.is_empty() {
            return Err(Error::Manifest(format!(
                "{} differs from {}: {}",
                path.display(),
                loaded[0].0.display(),
                diffs.join(", ")
            )));
        }
    }

    let selected: Vec<&Checkpoint> = loaded
        .iter()
        .map(|(_, c)| c)
        .filter(|c| {
            c.scalar_value::<f64>(VALIDATION_SSIM_KEY).map(|v| v >= min_ssim).unwrap_or(min_ssim <= 0.0)
        })
        .collect();
    if selected.is_empty() {
        return Err(Error::Contract(format!(
            "no checkpoint clears the validation SSIM threshold {}",
            min_ssim
        )));
    }

    let mut out = Checkpoint::new();
    let n = selected.len() as f64;
    for rec in reference.records() {
        let sums = selected.iter().fold(vec![0f64; rec.num_elements()], |mut acc, c| {
            accumulate(&mut acc, c.record(&rec.name).expect("manifest checked"));
            acc
        });
        match rec.dtype {
            Dtype::F32 => {
                let data: Vec<f32> = sums.iter().map(|&s| (s / n) as f32).collect();
                out.insert_tensor(
                    &rec.name,
                    &stremn_core::Tensor::from_vec(&rec.dims, data).expect("manifest dims"),
                )?;
            }
            Dtype::F64 => {
                let data: Vec<f64> = sums.iter().map(|&s| s / n).collect();
                out.insert_tensor(
                    &rec.name,
                    &stremn_core::Tensor::from_vec(&rec.dims, data).expect("manifest dims"),
                )?;
            }
        }
    }
    Ok(out)
}

fn accumulate(acc: &mut [f64], rec: &Record) {
    match rec.dtype {
        Dtype::F32 => {
            for (i, chunk) in rec.bytes.chunks_exact(4).enumerate() {
                acc[i] += f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
        Dtype::F64 => {
            for (i, chunk) in rec.bytes.chunks_exact(8).enumerate() {
                acc[i] += f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
    }
}

fn manifest_diff(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let ma = a.manifest();
    let mb = b.manifest();
    let mut diffs = Vec::new();
    let names_b: std::collections::BTreeMap<&str, (&Dtype, &Vec<usize>)> =
        mb.iter().map(|(n, d, dims)| (n.as_str(), (d, dims))).collect();
    for (name, dtype, dims) in &ma {
        match names_b.get(name.as_str()) {
            None => diffs.push(format!("missing '{}'", name)),
            Some((d2, dims2)) => {
                if **d2 != *dtype || *dims2 != dims {
                    diffs.push(format!("'{}' shape/dtype mismatch", name));
                }
            }
        }
    }
    for (name, _, _) in &mb {
        if !ma.iter().any(|(n, _, _)| n == name) {
            diffs.push(format!("extra '{}'", name));
        }
    }
    diffs
}

#[cfg(test)]
mod tests {
    use super::*;
    use stremn_core::Tensor;

    fn write_ckpt(dir: &std::path::Path, name: &str, value: f32, ssim: f64) -> PathBuf {
        let mut c = Checkpoint::new();
        c.insert_tensor("w", &Tensor::from_vec(&[2], vec![value, -value]).unwrap()).unwrap();
        c.insert_scalar::<f64>(VALIDATION_SSIM_KEY, ssim).unwrap();
        let p = dir.join(name);
        c.save(&p).unwrap();
        p
    }

    #[test]
    fn self_average_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_ckpt(dir.path(), "a.strm", 0.1234567, 0.9);
        let b = write_ckpt(dir.path(), "b.strm", 0.1234567, 0.9);
        let avg = average_checkpoints(&[a.clone(), b], 0.0).unwrap();
        let w = avg.tensor::<f32>("w").unwrap();
        let orig = Checkpoint::load(&a).unwrap().tensor::<f32>("w").unwrap();
        assert!(w.bit_eq(&orig));
    }

    #[test]
    fn two_scalars_average_to_mean() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_ckpt(dir.path(), "a.strm", 1.0, 0.9);
        let b = write_ckpt(dir.path(), "b.strm", 3.0, 0.9);
        let avg = average_checkpoints(&[a, b], 0.0).unwrap();
        assert_eq!(avg.tensor::<f32>("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn selector_drops_low_ssim() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_ckpt(dir.path(), "a.strm", 1.0, 0.9);
        let b = write_ckpt(dir.path(), "b.strm", 3.0, 0.1);
        let avg = average_checkpoints(&[a.clone(), b.clone()], 0.5).unwrap();
        assert_eq!(avg.tensor::<f32>("w").unwrap().data()[0], 1.0, "only the 0.9 survives");
        assert!(average_checkpoints(&[a, b], 0.95).is_err(), "nothing clears 0.95");
    }

    #[test]
    fn manifest_mismatch_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_ckpt(dir.path(), "a.strm", 1.0, 0.9);
        let mut c = Checkpoint::new();
        c.insert_tensor("w", &Tensor::from_vec(&[3], vec![1f32, 2.0, 3.0]).unwrap()).unwrap();
        c.insert_scalar::<f64>(VALIDATION_SSIM_KEY, 0.9).unwrap();
        let b = dir.path().join("b.strm");
        c.save(&b).unwrap();
        let err = average_checkpoints(&[a, b], 0.0).unwrap_err();
        assert!(err.to_string().contains("'w'"), "error should name the parameter: {}", err);
    }
}

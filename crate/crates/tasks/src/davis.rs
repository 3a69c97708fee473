//! DAVIS-style directory ingestion and export.
//!
//! Layout: `Frames/<video>/NNNNN.png` (RGB) and `Masks/<video>/NNNNN.png`
//! (integer-labeled grayscale), 5-digit zero-padded contiguous numbering
//! starting at 0. Masks may stop early (annotated prefix) but frame 0 must
//! be annotated. Labels are remapped to dense 0..N with the mapping
//! reported back.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use stremn_core::tensor::Tensor;

use crate::error::{Error, Result};
use crate::SequenceSample;

#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub sample: SequenceSample,
    /// `(original label, dense label)` pairs, sorted by original label.
    pub label_map: Vec<(u8, u8)>,
}

impl std::fmt::Debug for SequenceSample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SequenceSample")
            .field("name", &self.name)
            .field("frames", &self.frames.len())
            .field("masks", &self.masks.len())
            .field("object_count", &self.object_count)
            .finish()
    }
}

fn list_numbered_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::ingest(&path, "unreadable file name"))?;
        if stem.len() != 5 || !stem.chars().all(|c| c.is_ascii_digit()) {
            return Err(Error::ingest(&path, "frame names must be 5-digit zero-padded"));
        }
        entries.push((stem.parse().unwrap(), path));
    }
    entries.sort_by_key(|(n, _)| *n);
    for (expect, (n, path)) in entries.iter().enumerate() {
        if *n != expect {
            return Err(Error::ingest(path, format!("non-contiguous numbering: expected {:05}", expect)));
        }
    }
    Ok(entries.into_iter().map(|(_, p)| p).collect())
}

fn load_frame(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::ingest(path, format!("cannot decode image: {}", e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[ch * h * w + y as usize * w + x as usize] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data).expect("frame dims"))
}

fn load_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::ingest(path, format!("cannot decode mask: {}", e)))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

/// Load every video under `root`, sorted by video name.
pub fn load_davis_style(root: &Path) -> Result<Vec<LoadedSequence>> {
    let frames_root = root.join("Frames");
    let masks_root = root.join("Masks");
    if !frames_root.is_dir() {
        return Err(Error::ingest(&frames_root, "missing Frames/ directory"));
    }
    let mut videos: Vec<PathBuf> = std::fs::read_dir(&frames_root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    videos.sort();
    if videos.is_empty() {
        return Err(Error::ingest(&frames_root, "no videos found"));
    }

    let mut out = Vec::new();
    for video_dir in videos {
        let name = video_dir.file_name().unwrap().to_string_lossy().to_string();
        let frame_paths = list_numbered_pngs(&video_dir)?;
        if frame_paths.is_empty() {
            return Err(Error::ingest(&video_dir, "video has no frames"));
        }
        let mut frames = Vec::with_capacity(frame_paths.len());
        let mut dims = None;
        for p in &frame_paths {
            let f = load_frame(p)?;
            match dims {
                None => dims = Some((f.shape()[1], f.shape()[2])),
                Some((h, w)) => {
                    if (f.shape()[1], f.shape()[2]) != (h, w) {
                        return Err(Error::ingest(p, format!(
                            "frame size {}x{} differs from first frame {}x{}",
                            f.shape()[1],
                            f.shape()[2],
                            h,
                            w
                        )));
                    }
                }
            }
            frames.push(f);
        }
        let (h, w) = dims.unwrap();

        let mask_dir = masks_root.join(&name);
        if !mask_dir.is_dir() {
            return Err(Error::ingest(&mask_dir, "missing mask directory (frame 0 ground truth is mandatory)"));
        }
        let mask_paths = list_numbered_pngs(&mask_dir)?;
        if mask_paths.is_empty() {
            return Err(Error::ingest(&mask_dir, "missing mask for frame 0"));
        }
        if mask_paths.len() > frames.len() {
            return Err(Error::ingest(&mask_dir, format!(
                "{} masks for {} frames",
                mask_paths.len(),
                frames.len()
            )));
        }
        let mut raw_masks = Vec::with_capacity(mask_paths.len());
        for p in &mask_paths {
            let (m, mh, mw) = load_mask(p)?;
            if (mh, mw) != (h, w) {
                return Err(Error::ingest(p, format!(
                    "mask size {}x{} differs from frames {}x{}",
                    mh, mw, h, w
                )));
            }
            raw_masks.push(m);
        }

        // densify labels: background 0 stays 0
        let mut labels: Vec<u8> = raw_masks
            .iter()
            .flat_map(|m| m.iter().copied())
            .filter(|&v| v != 0)
            .collect();
        labels.sort_unstable();
        labels.dedup();
        let label_map: Vec<(u8, u8)> = std::iter::once((0u8, 0u8))
            .chain(labels.iter().enumerate().map(|(i, &l)| (l, (i + 1) as u8)))
            .collect();
        let mut lut = [0u8; 256];
        for &(from, to) in &label_map {
            lut[from as usize] = to;
        }
        let masks: Vec<Vec<u8>> = raw_masks
            .into_iter()
            .map(|m| m.into_iter().map(|v| lut[v as usize]).collect())
            .collect();

        out.push(LoadedSequence {
            sample: SequenceSample {
                name,
                frames,
                masks,
                object_count: labels.len(),
                seed: 0,
            },
            label_map,
        });
    }
    Ok(out)
}

/// Export a sequence into the same layout (frames quantized to 8-bit).
pub fn save_sequence(sample: &SequenceSample, root: &Path) -> Result<()> {
    let fdir = root.join("Frames").join(&sample.name);
    let mdir = root.join("Masks").join(&sample.name);
    std::fs::create_dir_all(&fdir)?;
    std::fs::create_dir_all(&mdir)?;
    let (h, w) = sample.spatial();
    for (t, frame) in sample.frames.iter().enumerate() {
        let mut img = RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|ch| {
                    (frame.data()[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(fdir.join(format!("{:05}.png", t)))
            .map_err(|e| Error::ingest(&fdir, format!("cannot encode frame: {}", e)))?;
    }
    for (t, mask) in sample.masks.iter().enumerate() {
        let img = GrayImage::from_raw(w as u32, h as u32, mask.clone())
            .ok_or_else(|| Error::ingest(&mdir, "mask buffer size mismatch"))?;
        img.save(mdir.join(format!("{:05}.png", t)))
            .map_err(|e| Error::ingest(&mdir, format!("cannot encode mask: {}", e)))?;
    }
    Ok(())
}

//! Volume I/O, per-patient normalization, patch extraction, augmentation,
//! label encoding, fold splitting, and the synthetic phantom generator.

pub mod bvol;
mod phantom;

pub use bvol::{load_bvol, read_bvol, save_bvol, write_bvol, BvolFile};
pub use phantom::{gen_phantom, PhantomSpec};

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CunetError, Result};
use crate::tensor::Tensor;
use crate::util::seeded_rng;
use crate::volume::{validate_labels, Volume};

/// Modality order within a sample.
pub const MODALITY_NAMES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// One patient: four modality volumes in T1/T1ce/T2/FLAIR order, an optional
/// label volume, and an identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub modalities: [Volume<f64>; 4],
    pub labels: Option<Volume<u8>>,
}

impl VolumeSample {
    pub fn new(id: String, modalities: [Volume<f64>; 4], labels: Option<Volume<u8>>) -> Result<Self> {
        let dims = modalities[0].dims();
        for (i, m) in modalities.iter().enumerate() {
            if m.dims() != dims {
                return Err(CunetError::ShapeMismatch {
                    op: "VolumeSample",
                    detail: format!("modality {i} dims {:?} vs {:?}", m.dims(), dims),
                });
            }
            if let Some(v) = m.data().iter().find(|v| !v.is_finite()) {
                return Err(CunetError::InvalidArgument {
                    op: "VolumeSample",
                    detail: format!("modality {i} contains non-finite value {v}"),
                });
            }
        }
        if let Some(l) = &labels {
            if l.dims() != dims {
                return Err(CunetError::ShapeMismatch {
                    op: "VolumeSample",
                    detail: format!("labels dims {:?} vs {:?}", l.dims(), dims),
                });
            }
            validate_labels(l)?;
        }
        Ok(VolumeSample {
            id,
            modalities,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.modalities[0].dims()
    }

    /// Stack the four modalities into a [1, 4, d, h, w] network input.
    pub fn to_input_tensor(&self) -> Tensor {
        let dims = self.dims();
        let vol = dims[0] * dims[1] * dims[2];
        let mut data = Vec::with_capacity(4 * vol);
        for m in &self.modalities {
            data.extend_from_slice(m.data());
        }
        Tensor::from_vec(data, &[1, 4, dims[0], dims[1], dims[2]]).expect("consistent dims")
    }
}

/// Write a sample as a BVOL file (4 channels plus optional labels).
pub fn save_volume(sample: &VolumeSample, path: &Path) -> Result<()> {
    let file = BvolFile {
        channels: sample.modalities.to_vec(),
        labels: sample.labels.clone(),
    };
    save_bvol(path, &file)
}

/// Read a sample from a BVOL file; the id defaults to the file stem.
pub fn load_volume(path: &Path) -> Result<VolumeSample> {
    let file = load_bvol(path)?;
    if file.channels.len() != 4 {
        return Err(CunetError::Format {
            path: path.display().to_string(),
            detail: format!("expected 4 modality channels, got {}", file.channels.len()),
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    let mut it = file.channels.into_iter();
    let modalities = [
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
    ];
    VolumeSample::new(id, modalities, file.labels)
}

/// One dataset entry: an id and a BVOL path (relative paths resolve against
/// the manifest's directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let json = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    Ok(entries)
}

/// Load every sample listed in a manifest, with ids taken from the manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<VolumeSample>> {
    let base = manifest_path.parent().map(PathBuf::from).unwrap_or_default();
    let mut out = Vec::new();
    for entry in load_manifest(manifest_path)? {
        let p = PathBuf::from(&entry.path);
        let p = if p.is_absolute() { p } else { base.join(p) };
        let mut sample = load_volume(&p)?;
        sample.id = entry.id;
        out.push(sample);
    }
    Ok(out)
}

/// Modalities flagged as constant (std below 1e-8) during normalization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormFlags {
    pub constant_modalities: Vec<usize>,
}

/// Standardize each modality independently over its whole volume:
/// (x - mean) / std with population std. Constant modalities become zeros
/// and are flagged. Labels pass through untouched.
pub fn zscore_normalize(sample: &VolumeSample) -> (VolumeSample, NormFlags) {
    let mut flags = NormFlags::default();
    let mut modalities = sample.modalities.clone();
    for (i, m) in modalities.iter_mut().enumerate() {
        let n = m.voxels() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std < 1e-8 {
            m.data_mut().fill(0.0);
            flags.constant_modalities.push(i);
        } else {
            for v in m.data_mut() {
                *v = (*v - mean) / std;
            }
        }
    }
    (
        VolumeSample {
            id: sample.id.clone(),
            modalities,
            labels: sample.labels.clone(),
        },
        flags,
    )
}

/// Crop a patch at `origin` with the given size from all modalities (and
/// labels) identically. Out-of-bounds voxels are zero-filled when `zero_pad`
/// is set (background label 0); otherwise any out-of-bounds access is an
/// error. Returns the patch and whether padding was engaged.
pub fn extract_patch(
    sample: &VolumeSample,
    origin: [i64; 3],
    size: [usize; 3],
    zero_pad: bool,
) -> Result<(VolumeSample, bool)> {
    let dims = sample.dims();
    if size.iter().any(|&s| s == 0) {
        return Err(CunetError::InvalidArgument {
            op: "extract_patch",
            detail: format!("patch size must be positive, got {size:?}"),
        });
    }
    let mut padded = false;
    for a in 0..3 {
        if origin[a] < 0 || origin[a] + size[a] as i64 > dims[a] as i64 {
            if !zero_pad {
                return Err(CunetError::InvalidArgument {
                    op: "extract_patch",
                    detail: format!(
                        "axis {a}: origin {} size {} exceeds extent {} without zero-pad",
                        origin[a], size[a], dims[a]
                    ),
                });
            }
            padded = true;
        }
    }

    let crop_f64 = |src: &Volume<f64>| {
        let mut dst = Volume::new(size, 0.0);
        copy_region(src.dims(), src.data(), origin, size, dst.data_mut());
        dst
    };
    let modalities = [
        crop_f64(&sample.modalities[0]),
        crop_f64(&sample.modalities[1]),
        crop_f64(&sample.modalities[2]),
        crop_f64(&sample.modalities[3]),
    ];
    let labels = sample.labels.as_ref().map(|l| {
        let mut dst = Volume::new(size, 0u8);
        copy_region(l.dims(), l.data(), origin, size, dst.data_mut());
        dst
    });
    let patch = VolumeSample {
        id: format!(
            "{}@{},{},{}",
            sample.id, origin[0], origin[1], origin[2]
        ),
        modalities,
        labels,
    };
    Ok((patch, padded))
}

fn copy_region<T: Copy>(
    src_dims: [usize; 3],
    src: &[T],
    origin: [i64; 3],
    size: [usize; 3],
    dst: &mut [T],
) {
    for d in 0..size[0] {
        let sd = origin[0] + d as i64;
        if sd < 0 || sd >= src_dims[0] as i64 {
            continue;
        }
        for h in 0..size[1] {
            let sh = origin[1] + h as i64;
            if sh < 0 || sh >= src_dims[1] as i64 {
                continue;
            }
            // Clip the contiguous width run.
            let w_lo = (-origin[2]).max(0) as usize;
            let w_hi = (src_dims[2] as i64 - origin[2]).min(size[2] as i64).max(0) as usize;
            if w_lo >= w_hi {
                continue;
            }
            let src_row = (sd as usize * src_dims[1] + sh as usize) * src_dims[2];
            let dst_row = (d * size[1] + h) * size[2];
            let sw = (origin[2] + w_lo as i64) as usize;
            dst[dst_row + w_lo..dst_row + w_hi]
                .copy_from_slice(&src[src_row + sw..src_row + sw + (w_hi - w_lo)]);
        }
    }
}

/// Random rotation within [-1, 1] degrees about the axial (depth) axis with
/// bilinear in-plane resampling of modalities and nearest-neighbor labels,
/// followed by an independent width-axis mirror flip with probability 0.5.
/// Draw order is fixed (angle, then flip), so the result is deterministic
/// under a seeded RNG.
pub fn augment(sample: &VolumeSample, rng: &mut ChaCha8Rng) -> Result<VolumeSample> {
    if sample.labels.is_none() {
        return Err(CunetError::InvalidArgument {
            op: "augment",
            detail: "augmentation requires labels".into(),
        });
    }
    let angle_deg: f64 = rng.gen_range(-1.0..=1.0);
    let flip = rng.gen::<f64>() < 0.5;
    let rotated = rotate_axial(sample, angle_deg.to_radians())?;
    Ok(if flip { flip_width(&rotated) } else { rotated })
}

/// Rotate about the depth axis by `angle` radians around the in-plane center.
/// A zero angle reproduces the input exactly.
fn rotate_axial(sample: &VolumeSample, angle: f64) -> Result<VolumeSample> {
    let dims = sample.dims();
    let (hn, wn) = (dims[1], dims[2]);
    let (ch, cw) = ((hn as f64 - 1.0) / 2.0, (wn as f64 - 1.0) / 2.0);
    let (cos, sin) = (angle.cos(), angle.sin());

    // Source coordinates per output (h, w): inverse rotation.
    let src_coord = |h: usize, w: usize| -> (f64, f64) {
        let dh = h as f64 - ch;
        let dw = w as f64 - cw;
        (ch + cos * dh + sin * dw, cw - sin * dh + cos * dw)
    };

    let rotate_f64 = |src: &Volume<f64>| {
        let mut dst = Volume::new(dims, 0.0);
        for d in 0..dims[0] {
            for h in 0..hn {
                for w in 0..wn {
                    let (sh, sw) = src_coord(h, w);
                    let h0 = sh.floor();
                    let w0 = sw.floor();
                    let (fh, fw) = (sh - h0, sw - w0);
                    let mut acc = 0.0;
                    for (hi, wh) in [(h0 as i64, 1.0 - fh), (h0 as i64 + 1, fh)] {
                        if wh == 0.0 || hi < 0 || hi >= hn as i64 {
                            continue;
                        }
                        for (wi, ww) in [(w0 as i64, 1.0 - fw), (w0 as i64 + 1, fw)] {
                            if ww == 0.0 || wi < 0 || wi >= wn as i64 {
                                continue;
                            }
                            acc += wh * ww * src.get(d, hi as usize, wi as usize);
                        }
                    }
                    dst.set(d, h, w, acc);
                }
            }
        }
        dst
    };
    let rotate_labels = |src: &Volume<u8>| {
        let mut dst = Volume::new(dims, 0u8);
        for d in 0..dims[0] {
            for h in 0..hn {
                for w in 0..wn {
                    let (sh, sw) = src_coord(h, w);
                    let (hi, wi) = (sh.round() as i64, sw.round() as i64);
                    let v = if hi < 0 || hi >= hn as i64 || wi < 0 || wi >= wn as i64 {
                        0
                    } else {
                        *src.get(d, hi as usize, wi as usize)
                    };
                    dst.set(d, h, w, v);
                }
            }
        }
        dst
    };

    Ok(VolumeSample {
        id: sample.id.clone(),
        modalities: [
            rotate_f64(&sample.modalities[0]),
            rotate_f64(&sample.modalities[1]),
            rotate_f64(&sample.modalities[2]),
            rotate_f64(&sample.modalities[3]),
        ],
        labels: sample.labels.as_ref().map(rotate_labels),
    })
}

/// Mirror along the width axis. Involutive and bit-exact.
fn flip_width(sample: &VolumeSample) -> VolumeSample {
    fn flip<T: Copy>(src: &Volume<T>) -> Volume<T> {
        let dims = src.dims();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(dims[2]) {
            row.reverse();
        }
        Volume::from_vec(dims, data).expect("same dims")
    }
    VolumeSample {
        id: sample.id.clone(),
        modalities: [
            flip(&sample.modalities[0]),
            flip(&sample.modalities[1]),
            flip(&sample.modalities[2]),
            flip(&sample.modalities[3]),
        ],
        labels: sample.labels.as_ref().map(|l| flip(l)),
    }
}

/// Number of segmentation classes (background, NCR/NET, ED, ET).
pub const NUM_CLASSES: usize = 4;

/// Map raw labels {0, 1, 2, 4} to class indices {0, 1, 2, 3}.
pub fn encode_labels(raw: &Volume<u8>) -> Result<Volume<u8>> {
    let mut data = Vec::with_capacity(raw.voxels());
    for (i, &v) in raw.data().iter().enumerate() {
        data.push(match v {
            0 => 0,
            1 => 1,
            2 => 2,
            4 => 3,
            other => return Err(CunetError::InvalidLabel { value: other, index: i }),
        });
    }
    Ok(Volume::from_vec(raw.dims(), data)?)
}

/// Map class indices {0, 1, 2, 3} back to raw labels {0, 1, 2, 4}.
pub fn decode_labels(indices: &Volume<u8>) -> Result<Volume<u8>> {
    let mut data = Vec::with_capacity(indices.voxels());
    for (i, &v) in indices.data().iter().enumerate() {
        data.push(match v {
            0 => 0,
            1 => 1,
            2 => 2,
            3 => 4,
            other => return Err(CunetError::InvalidLabel { value: other, index: i }),
        });
    }
    Ok(Volume::from_vec(indices.dims(), data)?)
}

/// One-hot a class-index volume into a [1, D, d, h, w] tensor.
pub fn one_hot(indices: &Volume<u8>, num_classes: usize) -> Result<Tensor> {
    let dims = indices.dims();
    let vol = indices.voxels();
    let mut data = vec![0.0; num_classes * vol];
    for (i, &c) in indices.data().iter().enumerate() {
        if c as usize >= num_classes {
            return Err(CunetError::InvalidLabel { value: c, index: i });
        }
        data[c as usize * vol + i] = 1.0;
    }
    Tensor::from_vec(data, &[1, num_classes, dims[0], dims[1], dims[2]])
}

/// A k-fold partition of patient ids: disjoint, covering, sizes differ by at
/// most one. Deterministic per seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn validation(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    pub fn training(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect()
    }
}

/// Seeded shuffle then contiguous chunking into k folds; the first
/// (n mod k) folds receive the extra element.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 || ids.len() < k {
        return Err(CunetError::InvalidArgument {
            op: "make_folds",
            detail: format!("need at least k={k} ids, got {}", ids.len()),
        });
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = seeded_rng(seed, "folds");
    // Fisher-Yates.
    for i in (1..shuffled.len()).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.swap(i, j);
    }
    let n = shuffled.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(shuffled[start..start + len].to_vec());
        start += len;
    }
    Ok(FoldSplit { folds, seed })
}

/// Sample a training patch origin. In foreground-biased mode (every second
/// draw), the origin is anchored on a uniformly chosen tumor voxel so the
/// patch is guaranteed to contain it; otherwise the origin is uniform over
/// valid positions. `tumor_voxels` lists flat indices of nonzero labels.
pub fn sample_patch_origin(
    dims: [usize; 3],
    patch: [usize; 3],
    tumor_voxels: &[usize],
    foreground_bias: bool,
    rng: &mut ChaCha8Rng,
) -> [i64; 3] {
    let max_origin = [
        dims[0].saturating_sub(patch[0]),
        dims[1].saturating_sub(patch[1]),
        dims[2].saturating_sub(patch[2]),
    ];
    let biased = foreground_bias && !tumor_voxels.is_empty() && rng.gen::<f64>() < 0.5;
    if biased {
        let flat = tumor_voxels[rng.gen_range(0..tumor_voxels.len())];
        let w = flat % dims[2];
        let rest = flat / dims[2];
        let voxel = [rest / dims[1], rest % dims[1], w];
        let mut origin = [0i64; 3];
        for a in 0..3 {
            // Origins that keep the voxel inside the patch and the patch
            // inside the volume.
            let lo = voxel[a].saturating_sub(patch[a] - 1).min(max_origin[a]);
            let hi = voxel[a].min(max_origin[a]);
            origin[a] = rng.gen_range(lo..=hi) as i64;
        }
        origin
    } else {
        [
            rng.gen_range(0..=max_origin[0]) as i64,
            rng.gen_range(0..=max_origin[1]) as i64,
            rng.gen_range(0..=max_origin[2]) as i64,
        ]
    }
}

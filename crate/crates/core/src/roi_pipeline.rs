//! Turns annotated CT volumes into balanced, normalized, fold-assigned 2D
//! training patches.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging_io::{self, NoduleAnnotation, ScanVolume, PATCH_SIZE};

/// One normalized slice with its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePatch {
    /// Intensities in `[0,1]`, indexed `[y, x]`.
    pub image: Array2<f32>,
    /// Values in `{0,1}`.
    pub mask: Array2<u8>,
    pub class_label: u8,
    pub lesion_id: String,
    pub patient_id: String,
    /// Slice offset from the lesion's center slice.
    pub slice_index: i32,
    pub fold: Option<usize>,
    /// In-plane spacing in mm, `(y, x)`.
    pub spacing_yx: [f64; 2],
}

impl SlicePatch {
    pub fn positive_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn validate(&self) -> Result<()> {
        let id = format!("{}:{}", self.lesion_id, self.slice_index);
        if self.image.dim() != self.mask.dim() {
            return Err(Error::Shape(format!("{id}: image and mask shapes differ")));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Integrity(format!("{id}: image values outside [0,1]")));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::Integrity(format!("{id}: mask values outside {{0,1}}")));
        }
        if (self.class_label == 1) != (self.positive_pixels() > 0) || self.class_label > 1 {
            return Err(Error::Integrity(format!(
                "{id}: class_label {} disagrees with mask",
                self.class_label
            )));
        }
        Ok(())
    }
}

/// One raw (unnormalized) slice of a cropped region.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSlice {
    pub slice_index: i32,
    pub image: Array2<f32>,
}

/// The raw 3D window cropped around a nodule.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCrop {
    /// `(z, y, x)` voxel of the nodule centroid.
    pub center_voxel: [i64; 3],
    pub slices: Vec<RawSlice>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl RoiCrop {
    /// World coordinates (mm) of patch pixel `[0,0]` on the slice at
    /// `slice_index`, as `(z, y, x)`.
    pub fn patch_origin(&self, slice_index: i32) -> [f64; 3] {
        let half = (PATCH_SIZE / 2) as i64;
        let [cz, cy, cx] = self.center_voxel;
        [
            self.origin[0] + (cz + slice_index as i64) as f64 * self.spacing[0],
            self.origin[1] + (cy - half) as f64 * self.spacing[1],
            self.origin[2] + (cx - half) as f64 * self.spacing[2],
        ]
    }
}

/// Slices sharing one lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiStack {
    pub lesion_id: String,
    pub center_voxel: [i64; 3],
    pub slices: Vec<SlicePatch>,
}

/// Crops a `128×128×depth` window centered on the annotation.
///
/// The in-plane window is zero-padded where it leaves the volume. The depth
/// spans every slice within `max(half_depth_mm, diameter/2)` of the center,
/// restricted to the volume.
pub fn extract_roi(volume: &ScanVolume, ann: &NoduleAnnotation, half_depth_mm: f64) -> Result<RoiCrop> {
    if ann.series_id != volume.series_id {
        return Err(Error::Placement(format!(
            "annotation for series {} applied to volume {}",
            ann.series_id, volume.series_id
        )));
    }
    let (nz, ny, nx) = volume.shape();
    let dims = [nz, ny, nx];
    let mut center = [0i64; 3];
    for axis in 0..3 {
        let v = ((ann.center_world[axis] - volume.origin[axis]) / volume.spacing[axis]).round();
        if !(v >= 0.0 && v < dims[axis] as f64) {
            return Err(Error::Placement(format!(
                "nodule center {:?} mm maps to voxel axis {axis} = {v}, outside 0..{}",
                ann.center_world, dims[axis]
            )));
        }
        center[axis] = v as i64;
    }

    let half = half_depth_mm.max(ann.diameter_mm / 2.0);
    let reach = (half / volume.spacing[0] + 1e-9).floor() as i64;
    let half_w = (PATCH_SIZE / 2) as i64;
    let (y0, x0) = (center[1] - half_w, center[2] - half_w);
    let yr = (y0.max(0), (y0 + PATCH_SIZE as i64).min(ny as i64));
    let xr = (x0.max(0), (x0 + PATCH_SIZE as i64).min(nx as i64));

    let mut slices = Vec::new();
    for k in -reach..=reach {
        let z = center[0] + k;
        if z < 0 || z >= nz as i64 {
            continue;
        }
        let mut image = Array2::zeros((PATCH_SIZE, PATCH_SIZE));
        let src = volume
            .voxels
            .slice(s![z as usize, yr.0 as usize..yr.1 as usize, xr.0 as usize..xr.1 as usize]);
        image
            .slice_mut(s![
                (yr.0 - y0) as usize..(yr.1 - y0) as usize,
                (xr.0 - x0) as usize..(xr.1 - x0) as usize
            ])
            .assign(&src);
        slices.push(RawSlice {
            slice_index: k as i32,
            image,
        });
    }
    Ok(RoiCrop {
        center_voxel: center,
        slices,
        spacing: volume.spacing,
        origin: volume.origin,
    })
}

/// Maps intensities onto `[0,1]` with `clamp((I - i_min) / (i_max - i_min), 0, 1)`.
pub fn normalize_intensity(patch: &Array2<f32>, i_min: f64, i_max: f64) -> Result<Array2<f32>> {
    if !(i_max > i_min) || !i_min.is_finite() || !i_max.is_finite() {
        return Err(Error::Parameter(format!(
            "intensity range requires i_max > i_min, got [{i_min}, {i_max}]"
        )));
    }
    let range = i_max - i_min;
    Ok(patch.mapv(|v| ((v as f64 - i_min) / range).clamp(0.0, 1.0) as f32))
}

/// World-space placement of one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceGeometry {
    /// World coordinates of pixel `[0,0]`, `(z, y, x)` in mm.
    pub origin: [f64; 3],
    pub spacing_yx: [f64; 2],
    pub shape: (usize, usize),
}

/// Marks every pixel whose world position lies within the annotated sphere.
pub fn synthesize_sphere_mask(ann: &NoduleAnnotation, geom: &SliceGeometry) -> Array2<u8> {
    let r2 = (ann.diameter_mm / 2.0).powi(2);
    let dz = geom.origin[0] - ann.center_world[0];
    Array2::from_shape_fn(geom.shape, |(i, j)| {
        let dy = geom.origin[1] + i as f64 * geom.spacing_yx[0] - ann.center_world[1];
        let dx = geom.origin[2] + j as f64 * geom.spacing_yx[1] - ann.center_world[2];
        (dz * dz + dy * dy + dx * dx <= r2) as u8
    })
}

/// Normalizes a crop and attaches sphere-derived masks.
pub fn label_roi(
    crop: &RoiCrop,
    ann: &NoduleAnnotation,
    lesion_id: &str,
    patient_id: &str,
    i_min: f64,
    i_max: f64,
) -> Result<RoiStack> {
    let spacing_yx = [crop.spacing[1], crop.spacing[2]];
    let slices = crop
        .slices
        .iter()
        .map(|raw| {
            let geom = SliceGeometry {
                origin: crop.patch_origin(raw.slice_index),
                spacing_yx,
                shape: raw.image.dim(),
            };
            let mask = synthesize_sphere_mask(ann, &geom);
            let class_label = mask.iter().any(|&m| m == 1) as u8;
            Ok(SlicePatch {
                image: normalize_intensity(&raw.image, i_min, i_max)?,
                mask,
                class_label,
                lesion_id: lesion_id.to_string(),
                patient_id: patient_id.to_string(),
                slice_index: raw.slice_index,
                fold: None,
                spacing_yx,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RoiStack {
        lesion_id: lesion_id.to_string(),
        center_voxel: crop.center_voxel,
        slices,
    })
}

/// Options for [`build_slice_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceSelection {
    /// Empty slices kept per nodule-bearing slice.
    pub keep_ratio: f64,
    pub k_folds: usize,
    pub seed: u64,
    /// Fraction of lesions held out with no fold (the test split).
    pub test_fraction: f64,
}

impl Default for SliceSelection {
    fn default() -> Self {
        Self {
            keep_ratio: 1.0,
            k_folds: 5,
            seed: 0,
            test_fraction: 0.0,
        }
    }
}

fn select_slices(stack: &RoiStack, keep_ratio: f64) -> Vec<SlicePatch> {
    let mut ordered: Vec<&SlicePatch> = stack.slices.iter().collect();
    ordered.sort_by_key(|p| p.slice_index);
    let nodule: Vec<usize> = ordered
        .iter()
        .enumerate()
        .filter(|(_, p)| p.class_label == 1)
        .map(|(i, _)| i)
        .collect();
    let (Some(&lo), Some(&hi)) = (nodule.first(), nodule.last()) else {
        return Vec::new();
    };
    let quota = (keep_ratio * nodule.len() as f64).round() as usize;
    let mut empties: Vec<(usize, usize)> = ordered
        .iter()
        .enumerate()
        .filter(|(_, p)| p.class_label == 0)
        .map(|(i, _)| {
            let dist = if i < lo { lo - i } else { i.saturating_sub(hi) };
            (dist, i)
        })
        .collect();
    empties.sort();
    let mut keep = vec![false; ordered.len()];
    for &i in &nodule {
        keep[i] = true;
    }
    for &(_, i) in empties.iter().take(quota) {
        keep[i] = true;
    }
    ordered
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.clone())
        .collect()
}

/// Keeps every nodule-bearing slice plus the nearest empty slices (up to
/// `round(keep_ratio · nodule_count)` per lesion) and assigns folds per
/// lesion with a seeded shuffle.
pub fn build_slice_dataset(stacks: &[RoiStack], opts: &SliceSelection) -> Result<Vec<SlicePatch>> {
    if opts.k_folds < 2 {
        return Err(Error::Config(format!("k_folds must be >= 2, got {}", opts.k_folds)));
    }
    if !(opts.keep_ratio >= 0.0 && opts.keep_ratio.is_finite()) {
        return Err(Error::Config(format!("keep_ratio must be >= 0, got {}", opts.keep_ratio)));
    }
    if !(0.0..1.0).contains(&opts.test_fraction) {
        return Err(Error::Config(format!(
            "test_fraction must lie in [0,1), got {}",
            opts.test_fraction
        )));
    }

    let mut per_lesion: Vec<(String, Vec<SlicePatch>)> = Vec::new();
    for stack in stacks {
        let kept = select_slices(stack, opts.keep_ratio);
        if kept.is_empty() {
            log::warn!("lesion {} has no nodule-bearing slice; skipped", stack.lesion_id);
            continue;
        }
        match per_lesion.iter_mut().find(|(id, _)| *id == stack.lesion_id) {
            Some((_, v)) => v.extend(kept),
            None => per_lesion.push((stack.lesion_id.clone(), kept)),
        }
    }

    let mut order: Vec<usize> = (0..per_lesion.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    order.shuffle(&mut rng);
    let n_test = (opts.test_fraction * order.len() as f64).round() as usize;
    let n_cv = order.len() - n_test;
    if n_cv < opts.k_folds {
        return Err(Error::Config(format!(
            "{n_cv} cross-validation lesions cannot fill {} folds",
            opts.k_folds
        )));
    }
    let mut fold_of = vec![None; per_lesion.len()];
    for (rank, &lesion) in order.iter().enumerate() {
        if rank >= n_test {
            fold_of[lesion] = Some((rank - n_test) % opts.k_folds);
        }
    }

    Ok(per_lesion
        .into_iter()
        .zip(fold_of)
        .flat_map(|((_, slices), fold)| {
            slices.into_iter().map(move |mut p| {
                p.fold = fold;
                p
            })
        })
        .collect())
}

/// Flips image and mask together.
pub fn flip(patch: &SlicePatch, horizontal: bool, vertical: bool) -> SlicePatch {
    let mut out = patch.clone();
    if horizontal {
        out.image.invert_axis(Axis(1));
        out.mask.invert_axis(Axis(1));
    }
    if vertical {
        out.image.invert_axis(Axis(0));
        out.mask.invert_axis(Axis(0));
    }
    out.image = out.image.as_standard_layout().into_owned();
    out.mask = out.mask.as_standard_layout().into_owned();
    out
}

/// Horizontal and vertical flips, each applied independently with probability 0.5.
pub fn augment_flip<R: Rng + ?Sized>(patch: &SlicePatch, rng: &mut R) -> SlicePatch {
    let horizontal = rng.random_bool(0.5);
    let vertical = rng.random_bool(0.5);
    flip(patch, horizontal, vertical)
}

/// Preprocessing settings used by [`preprocess_scans`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    pub i_min: f64,
    pub i_max: f64,
    pub half_depth_mm: f64,
    pub selection: SliceSelection,
}

/// Statistics reported by [`preprocess_scans`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PreprocessSummary {
    pub volumes: usize,
    pub annotations: usize,
    pub rejected_annotations: usize,
    pub unmatched_annotations: usize,
    pub lesions: usize,
    pub slices: usize,
}

/// Reads every `*.mhd` under `volumes_dir`, crops each annotated nodule and
/// returns the balanced, fold-assigned slice dataset.
pub fn preprocess_scans(
    volumes_dir: &Path,
    annotations_csv: &Path,
    opts: &PreprocessOptions,
) -> Result<(Vec<SlicePatch>, PreprocessSummary)> {
    let table = imaging_io::read_annotations(annotations_csv)?;
    let mut by_series: BTreeMap<&str, Vec<&NoduleAnnotation>> = BTreeMap::new();
    for a in &table.annotations {
        by_series.entry(a.series_id.as_str()).or_default().push(a);
    }
    let mut summary = PreprocessSummary {
        annotations: table.annotations.len(),
        rejected_annotations: table.rejected,
        ..Default::default()
    };

    let mut stacks = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for path in imaging_io::list_metaimages(volumes_dir)? {
        let volume = imaging_io::read_metaimage(&path)?;
        summary.volumes += 1;
        seen.insert(volume.series_id.clone(), ());
        let Some(anns) = by_series.get(volume.series_id.as_str()) else {
            continue;
        };
        for (i, ann) in anns.iter().enumerate() {
            let crop = extract_roi(&volume, ann, opts.half_depth_mm)?;
            let lesion_id = format!("{}_n{i}", volume.series_id);
            stacks.push(label_roi(&crop, ann, &lesion_id, &volume.series_id, opts.i_min, opts.i_max)?);
        }
    }
    summary.unmatched_annotations = table
        .annotations
        .iter()
        .filter(|a| !seen.contains_key(&a.series_id))
        .count();
    let patches = build_slice_dataset(&stacks, &opts.selection)?;
    let mut lesions: Vec<&str> = patches.iter().map(|p| p.lesion_id.as_str()).collect();
    lesions.dedup();
    summary.lesions = lesions.len();
    summary.slices = patches.len();
    Ok((patches, summary))
}

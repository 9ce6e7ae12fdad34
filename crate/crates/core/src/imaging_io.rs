//! MetaImage volumes, nodule annotation tables and the on-disk patch dataset.
//!
//! All arrays use the `(Z, Y, X)` axis order. MetaImage headers and the
//! annotation table list coordinates as `(X, Y, Z)` and are reordered on read.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi_pipeline::SlicePatch;

/// Side length of every stored patch.
pub const PATCH_SIZE: usize = 128;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// A CT volume in raw attenuation units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanVolume {
    /// Voxels indexed `[z, y, x]`.
    pub voxels: Array3<f32>,
    /// mm per voxel, `(z, y, x)`.
    pub spacing: [f64; 3],
    /// World position of voxel `[0,0,0]` in mm, `(z, y, x)`.
    pub origin: [f64; 3],
    pub series_id: String,
}

impl ScanVolume {
    pub fn new(
        voxels: Array3<f32>,
        spacing: [f64; 3],
        origin: [f64; 3],
        series_id: impl Into<String>,
    ) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Format(format!("spacing must be positive, got {spacing:?}")));
        }
        if voxels.iter().len() == 0 {
            return Err(Error::Format("volume has an empty dimension".into()));
        }
        Ok(Self {
            voxels,
            spacing,
            origin,
            series_id: series_id.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ElementType {
    fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "MET_CHAR" => Self::I8,
            "MET_UCHAR" => Self::U8,
            "MET_SHORT" => Self::I16,
            "MET_USHORT" => Self::U16,
            "MET_INT" | "MET_LONG" => Self::I32,
            "MET_UINT" | "MET_ULONG" => Self::U32,
            "MET_FLOAT" => Self::F32,
            "MET_DOUBLE" => Self::F64,
            other => return Err(Error::Format(format!("unsupported ElementType {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f32 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(b);
                if big_endian {
                    <$t>::from_be_bytes(a)
                } else {
                    <$t>::from_le_bytes(a)
                }
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f32,
            Self::U8 => b[0] as f32,
            Self::I16 => num!(i16, 2) as f32,
            Self::U16 => num!(u16, 2) as f32,
            Self::I32 => num!(i32, 4) as f32,
            Self::U32 => num!(u32, 4) as f32,
            Self::F32 => num!(f32, 4),
            Self::F64 => num!(f64, 8) as f32,
        }
    }
}

fn parse_header(text: &str) -> HashMap<String, String> {
    text.lines()
        .filter_map(|line| {
            let (k, v) = line.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn parse_floats(fields: &HashMap<String, String>, key: &str, n: usize) -> Result<Vec<f64>> {
    let raw = fields
        .get(key)
        .ok_or_else(|| Error::Format(format!("missing header key {key}")))?;
    let values = raw
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{key}: {e}")))?;
    if values.len() != n {
        return Err(Error::Format(format!(
            "{key}: expected {n} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}

fn is_true(fields: &HashMap<String, String>, key: &str) -> bool {
    fields
        .get(key)
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
}

/// Reads a 3D MetaImage (`.mhd` header plus detached raw data file).
pub fn read_metaimage(path: &Path) -> Result<ScanVolume> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fields = parse_header(&text);

    if let Some(nd) = fields.get("NDims") {
        if nd.trim() != "3" {
            return Err(Error::Format(format!("NDims = {nd}, only 3D volumes are supported")));
        }
    }
    if is_true(&fields, "CompressedData") {
        return Err(Error::Format("compressed MetaImage data is not supported".into()));
    }
    let dims = parse_floats(&fields, "DimSize", 3)?;
    if dims.iter().any(|d| *d < 1.0 || d.fract() != 0.0) {
        return Err(Error::Format(format!("invalid DimSize {dims:?}")));
    }
    let dims: Vec<usize> = dims.iter().map(|d| *d as usize).collect();
    let spacing = parse_floats(&fields, "ElementSpacing", 3)?;
    let origin = match ["Offset", "Origin", "Position"]
        .iter()
        .find(|k| fields.contains_key(**k))
    {
        Some(key) => parse_floats(&fields, key, 3)?,
        None => vec![0.0; 3],
    };
    let element = ElementType::parse(
        fields
            .get("ElementType")
            .ok_or_else(|| Error::Format("missing header key ElementType".into()))?,
    )?;
    let data_file = fields
        .get("ElementDataFile")
        .ok_or_else(|| Error::Format("missing header key ElementDataFile".into()))?;
    if data_file == "LOCAL" || data_file == "LIST" || data_file.contains('%') {
        return Err(Error::Format(format!(
            "ElementDataFile = {data_file} is not supported; expected a detached raw file"
        )));
    }
    let big_endian = is_true(&fields, "ElementByteOrderMSB") || is_true(&fields, "BinaryDataByteOrderMSB");

    let raw_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let count = dims[0] * dims[1] * dims[2];
    let expected = count * element.size();
    let header_size: i64 = fields
        .get("HeaderSize")
        .map(|v| v.parse().map_err(|e| Error::Format(format!("HeaderSize: {e}"))))
        .transpose()?
        .unwrap_or(0);
    let skip = if header_size < 0 {
        bytes.len().saturating_sub(expected)
    } else {
        header_size as usize
    };
    if bytes.len() != skip + expected {
        return Err(Error::Truncation {
            path: raw_path,
            expected: (skip + expected) as u64,
            found: bytes.len() as u64,
        });
    }
    let values: Vec<f32> = bytes[skip..]
        .chunks_exact(element.size())
        .map(|b| element.decode(b, big_endian))
        .collect();
    // DimSize is x y z; x varies fastest.
    let voxels = Array3::from_shape_vec((dims[2], dims[1], dims[0]), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    let series_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ScanVolume::new(
        voxels,
        [spacing[2], spacing[1], spacing[0]],
        [origin[2], origin[1], origin[0]],
        series_id,
    )
}

/// Writes `volume` as `<path>` (header) plus `<stem>.raw` holding little-endian
/// 32-bit floats.
pub fn write_metaimage(volume: &ScanVolume, path: &Path) -> Result<()> {
    let (z, y, x) = volume.shape();
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::Format(format!("{} has no file stem", path.display())))?
        .to_string_lossy()
        .into_owned();
    let raw_name = format!("{stem}.raw");
    let raw_path = path.with_file_name(&raw_name);
    let [sz, sy, sx] = volume.spacing;
    let [oz, oy, ox] = volume.origin;
    let header = format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n\
         CompressedData = False\nOffset = {ox} {oy} {oz}\nElementSpacing = {sx} {sy} {sz}\n\
         DimSize = {x} {y} {z}\nElementType = MET_FLOAT\nElementDataFile = {raw_name}\n"
    );
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(x * y * z * 4);
    for v in volume.voxels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// A merged nodule annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub series_id: String,
    /// World-space centroid in mm, `(z, y, x)`.
    pub center_world: [f64; 3],
    pub diameter_mm: f64,
}

/// Parsed annotation rows together with the number of rejected rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationTable {
    pub annotations: Vec<NoduleAnnotation>,
    pub rejected: usize,
}

/// I/O failures stay I/O errors; anything else is malformed content.
fn csv_error(path: &Path, e: csv::Error) -> Error {
    if !e.is_io_error() {
        return Error::Format(format!("{}: {e}", path.display()));
    }
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        _ => unreachable!("checked by is_io_error"),
    }
}

/// Reads a `seriesuid,coordX,coordY,coordZ,diameter_mm` table.
///
/// Rows that fail to parse or carry a non-positive diameter are skipped and
/// counted in [`AnnotationTable::rejected`].
pub fn read_annotations(path: &Path) -> Result<AnnotationTable> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("annotation table lacks column {name}")))
    };
    let cols = [
        column("seriesuid")?,
        column("coordX")?,
        column("coordY")?,
        column("coordZ")?,
        column("diameter_mm")?,
    ];

    let mut table = AnnotationTable::default();
    for record in reader.records() {
        let Ok(record) = record else {
            table.rejected += 1;
            continue;
        };
        let number = |i: usize| record.get(cols[i]).and_then(|v| v.parse::<f64>().ok());
        let parsed = (|| {
            let series = record.get(cols[0]).filter(|s| !s.is_empty())?;
            let (x, y, z, d) = (number(1)?, number(2)?, number(3)?, number(4)?);
            let finite = [x, y, z, d].iter().all(|v| v.is_finite());
            (finite && d > 0.0).then(|| NoduleAnnotation {
                series_id: series.to_string(),
                center_world: [z, y, x],
                diameter_mm: d,
            })
        })();
        match parsed {
            Some(a) => table.annotations.push(a),
            None => table.rejected += 1,
        }
    }
    if table.rejected > 0 {
        log::warn!(
            "{}: rejected {} malformed annotation rows",
            path.display(),
            table.rejected
        );
    }
    Ok(table)
}

/// One stored slice in a patch dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub class_label: u8,
    pub lesion_id: String,
    pub patient_id: String,
    pub slice_index: i32,
    pub fold: Option<usize>,
    pub spacing_yx: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub version: u32,
    pub patch_height: usize,
    pub patch_width: usize,
    pub entries: Vec<ManifestEntry>,
}

fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Writes patches as raw little-endian `f32` images and `u8` masks plus a
/// JSON manifest. Entry order follows `patches`.
pub fn write_patch_dataset(patches: &[SlicePatch], dir: &Path) -> Result<PatchManifest> {
    for p in patches {
        if p.image.dim() != (PATCH_SIZE, PATCH_SIZE) || p.mask.dim() != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::Shape(format!(
                "patch {}:{} is {:?}, expected {PATCH_SIZE}x{PATCH_SIZE}",
                p.lesion_id,
                p.slice_index,
                p.image.dim()
            )));
        }
        p.validate()?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut entries = Vec::with_capacity(patches.len());
    for p in patches {
        let base = format!("{}_{}", file_token(&p.lesion_id), p.slice_index);
        let image_path = format!("{base}.img");
        let mask_path = format!("{base}.msk");
        let mut img = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE * 4);
        for v in p.image.iter() {
            img.extend_from_slice(&v.to_le_bytes());
        }
        write_file(&dir.join(&image_path), &img)?;
        let msk: Vec<u8> = p.mask.iter().copied().collect();
        write_file(&dir.join(&mask_path), &msk)?;
        entries.push(ManifestEntry {
            image_path,
            mask_path,
            class_label: p.class_label,
            lesion_id: p.lesion_id.clone(),
            patient_id: p.patient_id.clone(),
            slice_index: p.slice_index,
            fold: p.fold,
            spacing_yx: p.spacing_yx,
        });
    }
    let manifest = PatchManifest {
        version: MANIFEST_VERSION,
        patch_height: PATCH_SIZE,
        patch_width: PATCH_SIZE,
        entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_exact_len(path: &Path, len: usize, what: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Integrity(format!("{what} {}: {e}", path.display())))?;
    if bytes.len() != len {
        return Err(Error::Integrity(format!(
            "{what} {} has {} bytes, expected {len}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Loads and validates a dataset written by [`write_patch_dataset`] (or an
/// externally produced one following the same layout).
pub fn load_patch_dataset(dir: &Path) -> Result<(PatchManifest, Vec<SlicePatch>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: PatchManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Integrity(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Integrity(format!(
            "manifest version {} is not supported",
            manifest.version
        )));
    }
    let (h, w) = (manifest.patch_height, manifest.patch_width);
    if h == 0 || w == 0 {
        return Err(Error::Integrity("manifest declares an empty patch size".into()));
    }

    let mut patches = Vec::with_capacity(manifest.entries.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let name = format!("entry {i} ({}:{})", e.lesion_id, e.slice_index);
        let img = read_exact_len(&dir.join(&e.image_path), 4 * h * w, "image")?;
        let msk = read_exact_len(&dir.join(&e.mask_path), h * w, "mask")?;
        let image: Vec<f32> = img
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if msk.iter().any(|&m| m > 1) {
            return Err(Error::Integrity(format!("{name}: mask values must be 0 or 1")));
        }
        let nonempty = msk.contains(&1);
        if (e.class_label == 1) != nonempty || e.class_label > 1 {
            return Err(Error::Integrity(format!(
                "{name}: class_label {} disagrees with mask ({} positive pixels)",
                e.class_label,
                msk.iter().filter(|&&m| m == 1).count()
            )));
        }
        patches.push(SlicePatch {
            image: Array2::from_shape_vec((h, w), image).expect("length checked"),
            mask: Array2::from_shape_vec((h, w), msk).expect("length checked"),
            class_label: e.class_label,
            lesion_id: e.lesion_id.clone(),
            patient_id: e.patient_id.clone(),
            slice_index: e.slice_index,
            fold: e.fold,
            spacing_yx: e.spacing_yx,
        });
    }
    Ok((manifest, patches))
}

/// Lists `*.mhd` files in `dir`, sorted by name.
pub fn list_metaimages(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("mhd")))
        .collect();
    out.sort();
    Ok(out)
}

pub const PREDICTIONS_FILE: &str = "predictions.json";

/// One predicted slice: a thresholded `u8` mask and the raw `f32` probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub lesion_id: String,
    pub slice_index: i32,
    pub mask_path: String,
    /// Absent for predictors that only emit binary masks.
    pub prob_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub version: u32,
    pub patch_height: usize,
    pub patch_width: usize,
    pub threshold: f64,
    pub entries: Vec<PredictionEntry>,
}

/// A slice prediction held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction {
    pub lesion_id: String,
    pub slice_index: i32,
    pub mask: Array2<bool>,
    pub prob: Option<Array2<f32>>,
}

/// Writes masks (`.pred.msk`, `u8`) and probability maps (`.prob`, little-endian
/// `f32`) plus an index, so external predictors can use the same layout.
pub fn write_predictions(preds: &[SlicePrediction], threshold: f64, dir: &Path) -> Result<PredictionIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(preds.len());
    for p in preds {
        if p.mask.dim() != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::Shape(format!("prediction {}:{} is {:?}", p.lesion_id, p.slice_index, p.mask.dim())));
        }
        let base = format!("{}_{}", file_token(&p.lesion_id), p.slice_index);
        let mask_path = format!("{base}.pred.msk");
        let msk: Vec<u8> = p.mask.iter().map(|&b| b as u8).collect();
        write_file(&dir.join(&mask_path), &msk)?;
        let prob_path = match &p.prob {
            Some(prob) => {
                let path = format!("{base}.prob");
                let bytes: Vec<u8> = prob.iter().flat_map(|v| v.to_le_bytes()).collect();
                write_file(&dir.join(&path), &bytes)?;
                Some(path)
            }
            None => None,
        };
        entries.push(PredictionEntry {
            lesion_id: p.lesion_id.clone(),
            slice_index: p.slice_index,
            mask_path,
            prob_path,
        });
    }
    let index = PredictionIndex {
        version: MANIFEST_VERSION,
        patch_height: PATCH_SIZE,
        patch_width: PATCH_SIZE,
        threshold,
        entries,
    };
    write_file(&dir.join(PREDICTIONS_FILE), &serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

pub fn read_predictions(dir: &Path) -> Result<Vec<SlicePrediction>> {
    let path = dir.join(PREDICTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: PredictionIndex =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    let (h, w) = (index.patch_height, index.patch_width);
    index
        .entries
        .iter()
        .map(|e| {
            let msk = read_exact_len(&dir.join(&e.mask_path), h * w, "mask")?;
            let prob = match &e.prob_path {
                Some(p) => {
                    let b = read_exact_len(&dir.join(p), 4 * h * w, "probability map")?;
                    let v = b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    Some(Array2::from_shape_vec((h, w), v).expect("length checked"))
                }
                None => None,
            };
            Ok(SlicePrediction {
                lesion_id: e.lesion_id.clone(),
                slice_index: e.slice_index,
                mask: Array2::from_shape_vec((h, w), msk.into_iter().map(|m| m > 0).collect()).expect("length checked"),
                prob,
            })
        })
        .collect()
}

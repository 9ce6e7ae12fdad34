#![allow(dead_code)]

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use nodseg_core::imaging_io::{write_metaimage, NoduleAnnotation, ScanVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes one verdict line straight to the process stderr so it survives
/// the test harness's output capture.
pub fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// A CT-like volume with bright spheres at each annotation on a noisy
/// background. Voxel `(k, j, i)` sits at `origin + (k, j, i) * spacing`.
pub fn sphere_volume(
    series: &str,
    shape: (usize, usize, usize),
    spacing: [f64; 3],
    nodules: &[Nodule],
    seed: u64,
) -> (ScanVolume, Vec<NoduleAnnotation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = Array3::from_shape_fn(shape, |(k, j, i)| {
        let p = [k as f64 * spacing[0], j as f64 * spacing[1], i as f64 * spacing[2]];
        let inside = nodules.iter().any(|(c, d)| {
            let r = d / 2.0;
            (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r
        });
        let noise: f32 = rng.random_range(-10.0..10.0);
        if inside {
            180.0 + noise
        } else {
            40.0 + noise
        }
    });
    let volume = ScanVolume::new(voxels, spacing, [0.0; 3], series).unwrap();
    let anns = nodules
        .iter()
        .map(|&(center_world, diameter_mm)| NoduleAnnotation {
            series_id: series.into(),
            center_world,
            diameter_mm,
        })
        .collect();
    (volume, anns)
}

/// Center (z, y, x) in mm and diameter.
type Nodule = ([f64; 3], f64);

/// Two volumes with three nodules each, written as MetaImage files plus an
/// annotation table. Returns the annotations in table order.
pub fn write_fixture(volumes_dir: &Path, annotations_csv: &Path) -> Vec<NoduleAnnotation> {
    fs::create_dir_all(volumes_dir).unwrap();
    let specs: [(&str, [Nodule; 3]); 2] = [
        (
            "scanA",
            [([20.0, 40.0, 40.0], 9.0), ([30.0, 80.0, 90.0], 12.0), ([50.0, 60.0, 50.0], 7.0)],
        ),
        (
            "scanB",
            [([24.0, 70.0, 40.0], 10.0), ([40.0, 44.0, 88.0], 8.0), ([56.0, 90.0, 70.0], 14.0)],
        ),
    ];
    let mut csv = String::from("seriesuid,coordX,coordY,coordZ,diameter_mm\n");
    let mut all = Vec::new();
    for (i, (series, nodules)) in specs.iter().enumerate() {
        let (vol, anns) = sphere_volume(series, (40, 128, 128), [2.0, 0.8, 0.8], nodules, i as u64);
        write_metaimage(&vol, &volumes_dir.join(format!("{series}.mhd"))).unwrap();
        for a in anns {
            let [z, y, x] = a.center_world;
            csv.push_str(&format!("{series},{x},{y},{z},{}\n", a.diameter_mm));
            all.push(a);
        }
    }
    fs::write(annotations_csv, csv).unwrap();
    all
}

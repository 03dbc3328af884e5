//! Cross-view datasets: generation, on-disk layout and loading.
//!
//! ```text
//! DIR/manifest.json
//! DIR/<split>/img/NNNN.ppm
//! DIR/<split>/mask/NNNN.pgm      (labeled splits only)
//! ```
//!
//! Splits: `source` and `source_test` hold car views, `target` and
//! `target_test` hold drone views.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::camera::{CameraPose, ViewTransform};
use super::generate::{sample_poses, sample_scene, SceneFamily};
use super::netpbm;
use super::render::{render, View, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::par;
use crate::prompt::Domain;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_source: usize,
    pub n_source_test: usize,
    pub n_target: usize,
    pub n_target_test: usize,
    /// Paired: source item `i` and target item `i` of a split pair show the
    /// same scene, and every target split is labeled.
    pub paired: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_source: 200,
            n_source_test: 50,
            n_target: 200,
            n_target_test: 50,
            paired: false,
        }
    }
}

impl DatasetSpec {
    /// `n` scenes, each rendered from both cameras, all labeled.
    pub fn paired(n: usize) -> Self {
        Self {
            n_source: n,
            n_source_test: 0,
            n_target: n,
            n_target_test: 0,
            paired: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub index: usize,
    pub scene_seed: u64,
    /// Pose of the rendered view.
    pub pose: CameraPose,
    /// The other camera of the same scene.
    pub counterpart: CameraPose,
    /// Maps the car pose of the scene onto its drone pose.
    pub car_to_drone: ViewTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub domain: Domain,
    pub labeled: bool,
    pub entries: Vec<SplitEntry>,
    /// Zero for unlabeled splits.
    pub class_pixel_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: DatasetSpec,
    pub family: SceneFamily,
    pub classes: Vec<String>,
    pub class_palette: Vec<[u8; 3]>,
    pub splits: Vec<SplitManifest>,
    /// Totals over the labeled splits.
    pub class_pixel_counts: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub meta: SplitManifest,
    /// Unlabeled splits loaded from disk carry empty masks.
    pub views: Vec<View>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits
            .iter()
            .find(|s| s.meta.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("dataset has no split {name:?}")))
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.manifest.family.resolution
    }
}

/// SplitMix64 finalizer; decorrelates seeds that differ in a few bits.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scene_seed(master: u64, stream: u64, index: usize) -> u64 {
    mix(mix(master ^ mix(stream)) ^ index as u64)
}

fn pixel_counts(views: &[View]) -> Vec<u64> {
    let mut counts = vec![0u64; NUM_CLASSES];
    for v in views {
        for &c in &v.mask {
            counts[c as usize] += 1;
        }
    }
    counts
}

/// Renders every split in memory. Scenes render in parallel; results and
/// counts are assembled in index order.
pub fn generate_dataset(family: &SceneFamily, spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.n_source + spec.n_target == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one scene".into()));
    }
    // Unpaired source and target use disjoint streams; paired ones share them.
    let plan = [
        ("source", Domain::Car, spec.n_source, 0u64, true),
        ("source_test", Domain::Car, spec.n_source_test, 2, true),
        (
            "target",
            Domain::Drone,
            spec.n_target,
            if spec.paired { 0 } else { 1 },
            spec.paired,
        ),
        (
            "target_test",
            Domain::Drone,
            spec.n_target_test,
            if spec.paired { 2 } else { 3 },
            true,
        ),
    ];
    let mut splits = Vec::new();
    for (name, domain, n, stream, labeled) in plan {
        if n == 0 {
            continue;
        }
        let rendered = par::try_map_range(n, |i| -> Result<(SplitEntry, View)> {
            let s = scene_seed(seed, stream, i);
            let scene = sample_scene(family, s)?;
            let (car, drone) = sample_poses(&scene, &family.poses, s)?;
            let (pose, counterpart) = match domain {
                Domain::Car => (car, drone),
                Domain::Drone => (drone, car),
            };
            let view = render(&scene, &pose)?;
            let entry = SplitEntry {
                index: i,
                scene_seed: s,
                pose,
                counterpart,
                car_to_drone: ViewTransform::between(&car, &drone)?,
            };
            Ok((entry, view))
        })?;
        let (entries, views): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
        let class_pixel_counts = if labeled {
            pixel_counts(&views)
        } else {
            vec![0; NUM_CLASSES]
        };
        splits.push(Split {
            meta: SplitManifest {
                name: name.to_string(),
                domain,
                labeled,
                entries,
                class_pixel_counts,
            },
            views,
        });
    }
    let mut totals = vec![0u64; NUM_CLASSES];
    for s in &splits {
        for (t, c) in totals.iter_mut().zip(&s.meta.class_pixel_counts) {
            *t += c;
        }
    }
    let manifest = Manifest {
        seed,
        spec: spec.clone(),
        family: family.clone(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        class_palette: family.class_palette.clone(),
        splits: splits.iter().map(|s| s.meta.clone()).collect(),
        class_pixel_counts: totals,
    };
    Ok(Dataset { manifest, splits })
}

fn file_name(index: usize, ext: &str) -> String {
    format!("{index:04}.{ext}")
}

pub fn write_dataset(dataset: &Dataset, out: &Path) -> Result<()> {
    for split in &dataset.splits {
        let dir = out.join(&split.meta.name);
        for (entry, view) in split.meta.entries.iter().zip(&split.views) {
            write_atomic(
                &dir.join("img").join(file_name(entry.index, "ppm")),
                &netpbm::encode_ppm(view.width, view.height, &view.image),
            )?;
            if split.meta.labeled {
                write_atomic(
                    &dir.join("mask").join(file_name(entry.index, "pgm")),
                    &netpbm::encode_pgm(view.width, view.height, &view.mask),
                )?;
            }
        }
    }
    crate::io::write_json(&out.join("manifest.json"), &dataset.manifest)
}

/// Generates and writes a dataset; returns it for immediate use.
pub fn make_cross_view_dataset(family: &SceneFamily, spec: &DatasetSpec, seed: u64, out: &Path) -> Result<Dataset> {
    let dataset = generate_dataset(family, spec, seed)?;
    write_dataset(&dataset, out)?;
    Ok(dataset)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let (w, h) = manifest.family.resolution;
    let mut splits = Vec::new();
    for meta in &manifest.splits {
        let base = dir.join(&meta.name);
        let views = par::try_map_range(meta.entries.len(), |k| -> Result<View> {
            let index = meta.entries[k].index;
            let img_path = base.join("img").join(file_name(index, "ppm"));
            let (iw, ih, ic, image) = netpbm::read(&img_path)?;
            if (iw, ih, ic) != (w, h, 3) {
                return Err(Error::Format {
                    path: img_path,
                    reason: format!("expected {w}x{h} RGB, found {iw}x{ih}x{ic}"),
                });
            }
            let mask = if meta.labeled {
                let mask_path = base.join("mask").join(file_name(index, "pgm"));
                let (mw, mh, mc, mask) = netpbm::read(&mask_path)?;
                if (mw, mh, mc) != (w, h, 1) || mask.iter().any(|&c| c as usize >= NUM_CLASSES) {
                    return Err(Error::Format {
                        path: mask_path,
                        reason: "mask size or class index out of range".into(),
                    });
                }
                mask
            } else {
                Vec::new()
            };
            Ok(View {
                width: w,
                height: h,
                image,
                mask,
            })
        })?;
        splits.push(Split {
            meta: meta.clone(),
            views,
        });
    }
    Ok(Dataset { manifest, splits })
}

#[cfg(test)]
mod tests {
    use super::super::camera::apply_view_transform;
    use super::super::render::{Appearance, ROAD, TERRAIN};
    use super::*;

    fn small_family() -> SceneFamily {
        SceneFamily {
            resolution: (24, 24),
            appearance: Appearance::flat(),
            color_jitter: 0,
            ..SceneFamily::default()
        }
    }

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_source: 6,
            n_source_test: 2,
            n_target: 6,
            n_target_test: 2,
            paired: false,
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let a = generate_dataset(&SceneFamily::default(), &small_spec(), 9).unwrap();
        let b = generate_dataset(&SceneFamily::default(), &small_spec(), 9).unwrap();
        for (sa, sb) in a.splits.iter().zip(&b.splits) {
            assert_eq!(sa.views, sb.views);
        }
        assert_eq!(
            serde_json::to_string(&a.manifest).unwrap(),
            serde_json::to_string(&b.manifest).unwrap()
        );
    }

    #[test]
    fn unpaired_streams_are_disjoint_and_paired_share_scenes() {
        let d = generate_dataset(&small_family(), &small_spec(), 4).unwrap();
        let seeds = |name: &str| -> Vec<u64> {
            d.split(name)
                .unwrap()
                .meta
                .entries
                .iter()
                .map(|e| e.scene_seed)
                .collect()
        };
        let src = seeds("source");
        assert!(seeds("target").iter().all(|s| !src.contains(s)));
        assert!(!d.split("target").unwrap().meta.labeled);

        let p = generate_dataset(&small_family(), &DatasetSpec::paired(3), 4).unwrap();
        let (s, t) = (p.split("source").unwrap(), p.split("target").unwrap());
        assert!(t.meta.labeled);
        for (a, b) in s.meta.entries.iter().zip(&t.meta.entries) {
            assert_eq!(a.scene_seed, b.scene_seed);
            let drone = apply_view_transform(&a.pose, &a.car_to_drone).unwrap();
            assert!((drone.extrinsic() - b.pose.extrinsic()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn flat_renders_are_registered() {
        let d = generate_dataset(&small_family(), &small_spec(), 2).unwrap();
        let palette = &d.manifest.class_palette;
        for split in &d.splits {
            for v in &split.views {
                for (px, &c) in v.image.chunks(3).zip(&v.mask) {
                    assert_eq!(px, palette[c as usize]);
                }
            }
        }
    }

    #[test]
    fn every_class_has_pixels() {
        let d = generate_dataset(&small_family(), &small_spec(), 5).unwrap();
        assert!(
            d.manifest.class_pixel_counts.iter().all(|&n| n > 0),
            "{:?}",
            d.manifest.class_pixel_counts
        );
        let road = d.manifest.class_pixel_counts[ROAD as usize];
        assert!(road > 0 && d.manifest.class_pixel_counts[TERRAIN as usize] > 0);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_cross_view_dataset(&SceneFamily::default(), &small_spec(), 1, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest, d.manifest);
        for (a, b) in d.splits.iter().zip(&back.splits) {
            for (va, vb) in a.views.iter().zip(&b.views) {
                assert_eq!(va.image, vb.image);
                if a.meta.labeled {
                    assert_eq!(va.mask, vb.mask);
                } else {
                    assert!(vb.mask.is_empty());
                }
            }
        }
        assert!(!dir.path().join("target/mask").exists());
    }
}

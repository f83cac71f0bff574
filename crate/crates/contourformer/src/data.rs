//! Synthetic-scene generation, COCO-format annotation ingestion and export,
//! and training-target preparation.

use crate::assignment::TargetInstance;
use crate::error::{Error, Result};
use crate::geometry::{resample_polygon, BBox, Point, RasterMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SHAPE_CLASSES: [&str; 5] = ["ellipse", "rectangle", "triangle", "star", "blob"];

/// One annotated instance: analytic outline polygon in normalized
/// coordinates plus its tight box.
#[derive(Debug, Clone)]
pub struct Instance {
    pub class_id: usize,
    pub polygon: Vec<Point>,
    pub bbox: BBox,
}

/// A rendered scene with its ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    /// Row-major HxWx3 RGB in [0,1].
    pub image: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Keep full (amodal) outlines and allow overlapping placements.
    pub occlusion: bool,
    pub seed: u64,
    pub n_images: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 256,
            min_instances: 1,
            max_instances: 6,
            occlusion: false,
            seed: 0,
            n_images: 200,
        }
    }
}

fn rotate(p: Point, c: Point, angle: f64) -> Point {
    let (s, co) = angle.sin_cos();
    Point::new(
        c.x + (p.x - c.x) * co - (p.y - c.y) * s,
        c.y + (p.x - c.x) * s + (p.y - c.y) * co,
    )
}

/// Analytic outline for one shape class, centered at `c`.
fn shape_outline(rng: &mut ChaCha8Rng, class_id: usize, c: Point, rx: f64, ry: f64) -> Vec<Point> {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let circle = |n: usize, radii: &dyn Fn(usize) -> (f64, f64)| -> Vec<Point> {
        (0..n)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                let (ax, ay) = radii(i);
                rotate(
                    Point::new(c.x + ax * t.cos(), c.y + ay * t.sin()),
                    c,
                    angle,
                )
            })
            .collect()
    };
    match class_id {
        0 => circle(48, &|_| (rx, ry)),
        1 => {
            let corners = [
                Point::new(c.x - rx, c.y - ry),
                Point::new(c.x + rx, c.y - ry),
                Point::new(c.x + rx, c.y + ry),
                Point::new(c.x - rx, c.y + ry),
            ];
            corners.iter().map(|p| rotate(*p, c, angle)).collect()
        }
        2 => (0..3)
            .map(|i| {
                let t = std::f64::consts::TAU * i as f64 / 3.0;
                rotate(Point::new(c.x + rx * t.cos(), c.y + ry * t.sin()), c, angle)
            })
            .collect(),
        3 => {
            let spikes = rng.gen_range(5..=7);
            let inner = rng.gen_range(0.45..0.6);
            circle(2 * spikes, &move |i| {
                if i % 2 == 0 {
                    (rx, ry)
                } else {
                    (rx * inner, ry * inner)
                }
            })
        }
        _ => {
            // blob: smoothed random radial perturbation
            let harmonics: Vec<(f64, f64)> = (2..5)
                .map(|_| (rng.gen_range(0.0..0.18), rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            (0..48)
                .map(|i| {
                    let t = std::f64::consts::TAU * i as f64 / 48.0;
                    let r: f64 = 1.0
                        + harmonics
                            .iter()
                            .enumerate()
                            .map(|(k, (a, ph))| a * ((k + 2) as f64 * t + ph).sin())
                            .sum::<f64>();
                    rotate(
                        Point::new(c.x + rx * r * t.cos(), c.y + ry * r * t.sin()),
                        c,
                        angle,
                    )
                })
                .collect()
        }
    }
}

/// Deterministic textured background plus filled shapes. Ground truth is
/// the exact analytic outline of each shape.
pub fn generate_scene(cfg: &DatasetConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let mut image = vec![0f32; size * size * 3];

    // low-frequency background with per-pixel noise
    let base = [
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
    ];
    let (fx, fy) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let wave = 0.08
                * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            for ch in 0..3 {
                let n = noise_rng.gen_range(-0.02..0.02);
                image[(y * size + x) * 3 + ch] =
                    (base[ch] as f64 + wave + n).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let n_instances = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut instances: Vec<Instance> = Vec::with_capacity(n_instances);
    for _ in 0..n_instances {
        // retry placement until non-overlapping (or always accept when
        // occlusion is allowed)
        let mut placed = None;
        for _attempt in 0..40 {
            let class_id = rng.gen_range(0..SHAPE_CLASSES.len());
            let rx: f64 = rng.gen_range(0.07..0.16);
            let ry: f64 = rng.gen_range(0.07..0.16);
            // blobs can extend ~1.5x past the nominal radius
            let margin = 1.6 * rx.max(ry) + 0.02;
            let c = Point::new(
                rng.gen_range(margin..1.0 - margin),
                rng.gen_range(margin..1.0 - margin),
            );
            let polygon = shape_outline(&mut rng, class_id, c, rx, ry);
            let bbox = BBox::tight(&polygon);
            let ok = cfg.occlusion
                || instances.iter().all(|i| i.bbox.iou(&bbox) < 0.01);
            if ok {
                placed = Some(Instance {
                    class_id,
                    polygon,
                    bbox,
                });
                break;
            }
        }
        if let Some(inst) = placed {
            instances.push(inst);
        }
    }

    // paint shapes back to front
    for inst in &instances {
        let mask = RasterMask::rasterize(&inst.polygon, size, 0.0, 0.0, 1.0, 1.0);
        let color = [
            rng.gen_range(0.4..1.0),
            rng.gen_range(0.4..1.0),
            rng.gen_range(0.4..1.0),
        ];
        let mut shade_rng = ChaCha8Rng::seed_from_u64(seed ^ inst.class_id as u64 ^ 0xabcd);
        for y in 0..size {
            for x in 0..size {
                if mask.get(y, x) {
                    for ch in 0..3 {
                        let n = shade_rng.gen_range(-0.03..0.03);
                        image[(y * size + x) * 3 + ch] =
                            (color[ch] as f64 + n).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }

    Scene {
        image,
        width: size,
        height: size,
        instances,
    }
}

/// Resample every instance to an `nv`-point clockwise contour; instances
/// that fail the resampling filters are dropped.
pub fn prepare_targets(scene: &Scene, nv: usize) -> Vec<TargetInstance> {
    scene
        .instances
        .iter()
        .filter_map(|inst| {
            let contour = resample_polygon(&inst.polygon, nv).ok()?;
            let bbox = contour.bbox();
            let pixel_area = bbox.w * bbox.h * (scene.width * scene.height) as f64;
            if pixel_area < 16.0 {
                return None;
            }
            Some(TargetInstance {
                contour,
                class_id: inst.class_id,
                bbox,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// COCO-format serialization

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Polygons as flat pixel-coordinate lists; RLE annotations are
    /// represented by a non-array value and skipped on load.
    #[serde(default)]
    pub segmentation: serde_json::Value,
    #[serde(default)]
    pub bbox: Vec<f64>,
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CocoJson {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Export scenes as COCO JSON plus PNG images under `out_dir`.
pub fn export_coco(scenes: &[Scene], out_dir: &Path) -> Result<()> {
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut ann_id = 1u64;
    for (idx, scene) in scenes.iter().enumerate() {
        let file_name = format!("im_{idx:06}.png");
        write_png(scene, &img_dir.join(&file_name))?;
        images.push(CocoImage {
            id: idx as u64 + 1,
            file_name,
            width: scene.width as u32,
            height: scene.height as u32,
        });
        for inst in &scene.instances {
            let flat: Vec<f64> = inst
                .polygon
                .iter()
                .flat_map(|p| [p.x * scene.width as f64, p.y * scene.height as f64])
                .collect();
            let (x0, y0, x1, y1) = inst.bbox.corners();
            annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: idx as u64 + 1,
                category_id: inst.class_id as u64 + 1,
                segmentation: serde_json::json!([flat]),
                bbox: vec![
                    x0 * scene.width as f64,
                    y0 * scene.height as f64,
                    (x1 - x0) * scene.width as f64,
                    (y1 - y0) * scene.height as f64,
                ],
                area: inst.bbox.area() * (scene.width * scene.height) as f64,
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    let categories = SHAPE_CLASSES
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i as u64 + 1,
            name: (*name).into(),
        })
        .collect();
    let json = CocoJson {
        images,
        annotations,
        categories,
    };
    let f = std::fs::File::create(out_dir.join("annotations.json"))?;
    serde_json::to_writer(std::io::BufWriter::new(f), &json)?;
    Ok(())
}

pub fn write_png(scene: &Scene, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(scene.width as u32, scene.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = (scene.image[i * 3 + ch].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f32 / 255.0)
        .collect();
    Ok((data, w, h))
}

/// Lazily-loading COCO dataset reader.
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations_by_image: Vec<Vec<Instance>>,
    pub image_root: PathBuf,
    /// Count of skipped annotations (iscrowd, RLE, degenerate) and missing
    /// image files.
    pub skipped: usize,
    pub n_classes: usize,
}

impl CocoDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Load the image pixels for entry `idx` and assemble the Scene.
    /// Returns `None` (and counts a skip at load time) for missing files.
    pub fn scene(&self, idx: usize) -> Result<Scene> {
        let rec = &self.images[idx];
        let (image, width, height) = read_png(&self.image_root.join(&rec.file_name))?;
        Ok(Scene {
            image,
            width,
            height,
            instances: self.annotations_by_image[idx].clone(),
        })
    }
}

/// Pick the largest outer ring of a multi-polygon segmentation, dropping the
/// instance when that ring covers less than half of the total area.
fn largest_ring(polys: &[Vec<Point>]) -> Option<&Vec<Point>> {
    let area = |p: &[Point]| {
        let n = p.len();
        (0..n)
            .map(|i| {
                let a = p[i];
                let b = p[(i + 1) % n];
                a.x * b.y - b.x * a.y
            })
            .sum::<f64>()
            .abs()
            * 0.5
    };
    let total: f64 = polys.iter().map(|p| area(p)).sum();
    let best = polys.iter().max_by(|a, b| {
        area(a)
            .partial_cmp(&area(b))
            .unwrap_or(std::cmp::Ordering::Equal)
    })?;
    if total > 0.0 && area(best) / total >= 0.5 {
        Some(best)
    } else {
        None
    }
}

/// Parse a COCO annotation file. Instances with RLE or iscrowd annotations
/// are skipped and counted; images are loaded lazily via
/// [`CocoDataset::scene`].
pub fn load_coco_annotations(path: &Path, image_root: &Path) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::DataLoad(format!("cannot read {}: {e}", path.display())))?;
    let json: CocoJson = serde_json::from_str(&text)
        .map_err(|e| Error::DataLoad(format!("malformed COCO JSON in {}: {e}", path.display())))?;

    let mut skipped = 0usize;
    let mut by_image: Vec<Vec<Instance>> = vec![Vec::new(); json.images.len()];
    let index_of: std::collections::HashMap<u64, usize> = json
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id, i))
        .collect();

    for ann in &json.annotations {
        let Some(&img_idx) = index_of.get(&ann.image_id) else {
            skipped += 1;
            continue;
        };
        if ann.iscrowd != 0 {
            skipped += 1;
            continue;
        }
        let Some(poly_list) = ann.segmentation.as_array() else {
            skipped += 1; // RLE object form
            continue;
        };
        let im = &json.images[img_idx];
        let polys: Vec<Vec<Point>> = poly_list
            .iter()
            .filter_map(|p| {
                let flat: Vec<f64> = p
                    .as_array()?
                    .iter()
                    .filter_map(|v| v.as_f64())
                    .collect();
                if flat.len() < 6 || flat.len() % 2 != 0 {
                    return None;
                }
                Some(
                    flat.chunks_exact(2)
                        .map(|c| Point::new(c[0] / im.width as f64, c[1] / im.height as f64))
                        .collect(),
                )
            })
            .collect();
        if polys.is_empty() {
            skipped += 1;
            continue;
        }
        let Some(ring) = largest_ring(&polys) else {
            skipped += 1;
            continue;
        };
        let polygon: Vec<Point> = ring
            .iter()
            .map(|p| Point::new(p.x.clamp(0.0, 1.0), p.y.clamp(0.0, 1.0)))
            .collect();
        let bbox = BBox::tight(&polygon);
        by_image[img_idx].push(Instance {
            class_id: (ann.category_id.max(1) - 1) as usize,
            polygon,
            bbox,
        });
    }

    // missing image files count as skips but do not abort the load
    for im in &json.images {
        if !image_root.join(&im.file_name).exists() {
            skipped += 1;
        }
    }

    let n_classes = json
        .categories
        .iter()
        .map(|c| c.id as usize)
        .max()
        .unwrap_or(SHAPE_CLASSES.len());
    Ok(CocoDataset {
        images: json.images,
        annotations_by_image: by_image,
        image_root: image_root.to_path_buf(),
        skipped,
        n_classes,
    })
}

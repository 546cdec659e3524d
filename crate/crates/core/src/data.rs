//! Synthetic place-recognition data: each place is a procedural texture,
//! each image a view of it under a random crop, rotation, lighting change,
//! blur, occlusion and sensor noise.
//!
//! On disk: `db/NNNNNN.tnsr`, `queries/NNNNNN.tnsr` and `gt.txt`. Ids are
//! positions in the sorted file lists.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::formats::{read_image, write_image};
use crate::image::Image;
use crate::index::GroundTruth;
use crate::train::augment::{augment, AugmentPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub places: usize,
    /// Images per place: one query, the rest database.
    pub per_place: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            places: 50,
            per_place: 4,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacesDataset {
    pub database: Vec<Image>,
    pub queries: Vec<Image>,
    pub ground_truth: GroundTruth,
}

struct Grating {
    freq: f32,
    cos: f32,
    sin: f32,
    phase: f32,
    amp: [f32; 3],
}

struct Blob {
    cx: f32,
    cy: f32,
    inv2r2: f32,
    color: [f32; 3],
}

struct Place {
    base: [f32; 3],
    gratings: Vec<Grating>,
    blobs: Vec<Blob>,
}

impl Place {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let base = [0; 3].map(|_| rng.random_range(0.25..0.75));
        let gratings = (0..4)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                Grating {
                    freq: rng.random_range(1.0..5.0),
                    cos: theta.cos(),
                    sin: theta.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp: [0; 3].map(|_| rng.random_range(-0.2..0.2)),
                }
            })
            .collect();
        let blobs = (0..3)
            .map(|_| {
                let r: f32 = rng.random_range(0.08..0.25);
                Blob {
                    cx: rng.random_range(0.1..0.9),
                    cy: rng.random_range(0.1..0.9),
                    inv2r2: 1.0 / (2.0 * r * r),
                    color: [0; 3].map(|_| rng.random_range(-0.4..0.4)),
                }
            })
            .collect();
        Self {
            base,
            gratings,
            blobs,
        }
    }

    /// Colour at continuous position `(u, v)` in the unit square.
    fn sample(&self, u: f32, v: f32) -> [f32; 3] {
        let mut out = self.base;
        for g in &self.gratings {
            let s = (2.0 * PI * g.freq * (u * g.cos + v * g.sin) + g.phase).sin();
            for c in 0..3 {
                out[c] += g.amp[c] * s;
            }
        }
        for b in &self.blobs {
            let w = (-((u - b.cx).powi(2) + (v - b.cy).powi(2)) * b.inv2r2).exp();
            for c in 0..3 {
                out[c] += b.color[c] * w;
            }
        }
        out
    }

    /// A view: zoom, shift and a small rotation of the unit square.
    fn render(&self, size: usize, rng: &mut ChaCha8Rng) -> Image {
        let zoom = rng.random_range(0.75..0.95f32);
        let cx = 0.5 + rng.random_range(-(1.0 - zoom) / 2.0..=(1.0 - zoom) / 2.0);
        let cy = 0.5 + rng.random_range(-(1.0 - zoom) / 2.0..=(1.0 - zoom) / 2.0);
        let rot = rng.random_range(-0.15..0.15f32);
        let (rs, rc) = rot.sin_cos();
        let mut img = Image::filled(3, size, size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let dx = ((x as f32 + 0.5) / size as f32 - 0.5) * zoom;
                let dy = ((y as f32 + 0.5) / size as f32 - 0.5) * zoom;
                let u = cx + rc * dx - rs * dy;
                let v = cy + rs * dx + rc * dy;
                let col = self.sample(u, v);
                for (c, val) in col.iter().enumerate() {
                    img.set(c, y, x, *val);
                }
            }
        }
        img
    }
}

fn nuisance() -> AugmentPolicy {
    AugmentPolicy {
        brightness: 0.8,
        blur: 0.4,
        crop: 0.0,
        color: 0.5,
        erase: 0.3,
    }
}

/// Deterministic in `params.seed`. Needs at least two images per place so
/// that every query has a database positive.
pub fn generate(params: &GenParams) -> Result<PlacesDataset> {
    if params.places == 0 || params.per_place < 2 || params.size == 0 {
        return Err(Error::InvalidArgument(format!(
            "need places >= 1, per_place >= 2, size >= 1 (got {}, {}, {})",
            params.places, params.per_place, params.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0f32, 0.02).expect("valid std");
    let policy = nuisance();
    let mut database = Vec::new();
    let mut queries = Vec::new();
    let mut gt = GroundTruth::default();
    for p in 0..params.places {
        let place = Place::random(&mut rng);
        let mut views = Vec::with_capacity(params.per_place);
        for _ in 0..params.per_place {
            let img = place.render(params.size, &mut rng);
            let mut img = augment(&img, rng.random(), &policy);
            for v in img.data_mut() {
                *v += noise.sample(&mut rng);
            }
            img.clamp01();
            views.push(img);
        }
        let first_db = database.len() as u64;
        queries.push(views.remove(0));
        database.extend(views);
        gt.insert(p as u64, first_db..database.len() as u64);
    }
    Ok(PlacesDataset {
        database,
        queries,
        ground_truth: gt,
    })
}

impl PlacesDataset {
    /// Place label of each database image (the id of its query), if any.
    pub fn database_labels(&self) -> Vec<Option<u64>> {
        let mut labels = vec![None; self.database.len()];
        for (&q, pos) in &self.ground_truth.positives {
            for &d in pos {
                if let Some(l) = labels.get_mut(d as usize) {
                    *l = Some(q);
                }
            }
        }
        labels
    }

    /// Expected recall@1 of a uniformly random ranking:
    /// mean over queries of `positives / database size`.
    pub fn random_recall_at_1(&self) -> f64 {
        let n = self.database.len() as f64;
        let gt = &self.ground_truth.positives;
        gt.values().map(|p| p.len() as f64 / n).sum::<f64>() / gt.len() as f64
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (sub, imgs) in [("db", &self.database), ("queries", &self.queries)] {
            let d = dir.join(sub);
            fs::create_dir_all(&d)?;
            for (i, img) in imgs.iter().enumerate() {
                write_image(d.join(format!("{i:06}.tnsr")), img)?;
            }
        }
        fs::write(dir.join("gt.txt"), self.ground_truth.to_text())?;
        Ok(())
    }

    /// Reads a dataset directory; images are fitted to `size × size` when
    /// given.
    pub fn read(dir: impl AsRef<Path>, size: Option<usize>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |sub: &str| -> Result<Vec<Image>> {
            image_files(&dir.join(sub))?
                .iter()
                .map(|p| {
                    let img = read_image(p)?;
                    Ok(match size {
                        Some(s) => img.fit_square(s),
                        None => img,
                    })
                })
                .collect()
        };
        let database = load("db")?;
        let queries = load("queries")?;
        let ground_truth = GroundTruth::parse(&fs::read_to_string(dir.join("gt.txt"))?)?;
        for (&q, pos) in &ground_truth.positives {
            if q as usize >= queries.len() || pos.iter().any(|&d| d as usize >= database.len()) {
                return Err(Error::malformed("ground truth", format!("query {q} references a missing image")));
            }
        }
        Ok(Self {
            database,
            queries,
            ground_truth,
        })
    }
}

/// Image files (`.tnsr`, `.ppm`) in `dir`, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("tnsr") | Some("ppm")
                )
        })
        .collect();
    files.sort();
    Ok(files)
}

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{make_split_manifest, write_sample, DataError, DataResult, DatasetManifest, SplitRatios};

/// Every changed pixel differs from the pre-change image by at least this
/// many byte levels in every channel; unchanged pixels are identical.
pub const CHANGE_THRESHOLD: u8 = 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub size: usize,
    pub change_fraction: f64,
    pub patches_per_site: usize,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_pairs: 8,
            size: 256,
            change_fraction: 0.2,
            patches_per_site: 1,
            split: SplitRatios::default(),
            seed: 8888,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> DataResult<()> {
        if self.n_pairs == 0 || self.patches_per_site == 0 || self.size < 8 {
            return Err(DataError::Argument(format!(
                "synthetic dataset needs n_pairs >= 1, patches_per_site >= 1 and size >= 8, got {self:?}"
            )));
        }
        if !(self.change_fraction > 0.0 && self.change_fraction < 1.0) {
            return Err(DataError::Argument(format!(
                "change_fraction must lie in (0, 1), got {}",
                self.change_fraction
            )));
        }
        self.split.validate()
    }
}

/// Bilinearly interpolated coarse noise, one value per pixel.
fn smooth_field(rng: &mut impl Rng, size: usize, cells: usize, amplitude: f64) -> Vec<f64> {
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-amplitude..amplitude)).collect();
    let scale = cells as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = (y as f64 + 0.5) * scale;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = (x as f64 + 0.5) * scale;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = fx - x0 as f64;
            let at = |r: usize, c: usize| grid[r * g + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Marks polygon regions until roughly `fraction` of the patch is covered.
fn excavation_mask(rng: &mut impl Rng, size: usize, fraction: f64) -> Vec<bool> {
    let total = (size * size) as f64;
    let target = fraction * total;
    let mut mask = vec![false; size * size];
    let mut covered = 0.0;
    for _ in 0..64 {
        if covered >= 0.97 * target {
            break;
        }
        let remaining = (target - covered).max(0.01 * total);
        let radius = ((remaining / PI).sqrt() * rng.gen_range(0.8..1.2)).clamp(2.0, size as f64 / 2.0);
        let margin = radius * 0.5;
        let cx = rng.gen_range(margin..size as f64 - margin);
        let cy = rng.gen_range(margin..size as f64 - margin);
        let vertices = rng.gen_range(5..9);
        let mut angles: Vec<f64> = (0..vertices).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let poly: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let r = radius * rng.gen_range(0.85..1.15);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                if !mask[i] && inside(&poly, x as f64 + 0.5, y as f64 + 0.5) {
                    mask[i] = true;
                    covered += 1.0;
                }
            }
        }
    }
    mask
}

/// One synthetic pair: a smooth textured scene and a copy of it with shifted
/// brightness inside random polygons.
pub fn synthesize_pair(rng: &mut impl Rng, size: usize, change_fraction: f64) -> (RgbImage, RgbImage, GrayImage) {
    let cells = (size / 16).max(2);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(80.0..170.0));
    let fields: Vec<Vec<f64>> = (0..3).map(|_| smooth_field(rng, size, cells, 40.0)).collect();
    let shared = smooth_field(rng, size, cells * 2, 15.0);
    let a = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        Rgb(std::array::from_fn(|c| {
            let v = base[c] + fields[c][i] + shared[i] + rng.gen_range(-6.0..6.0);
            v.round().clamp(0.0, 255.0) as u8
        }))
    });
    let mask = excavation_mask(rng, size, change_fraction);
    let mut b = a.clone();
    for (i, px) in b.pixels_mut().enumerate() {
        if mask[i] {
            for v in px.0.iter_mut() {
                let shift = 64 + rng.gen_range(0..16u8);
                *v = if *v < 128 { *v + shift } else { *v - shift };
            }
        }
    }
    let m = GrayImage::from_fn(size as u32, size as u32, |x, y| {
        Luma([if mask[y as usize * size + x as usize] { 255 } else { 0 }])
    });
    (a, b, m)
}

/// Writes `n_pairs` synthetic triplets and a manifest under `root`. Output
/// bytes depend only on `cfg`.
pub fn generate_synthetic_dataset(root: &Path, cfg: &SyntheticConfig) -> DataResult<DatasetManifest> {
    cfg.validate()?;
    let mut sites: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for k in 0..cfg.n_pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let (a, b, m) = synthesize_pair(&mut rng, cfg.size, cfg.change_fraction);
        let site = format!("site_{:04}", k / cfg.patches_per_site);
        let patch = format!("patch_{:03}", k % cfg.patches_per_site);
        write_sample(root, &site, &patch, &a, &b, &m)?;
        sites.entry(site).or_default().push(patch);
    }
    let split = make_split_manifest(&sites, cfg.split, cfg.seed)?;
    let manifest = DatasetManifest { sites, split };
    manifest.write(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Split, IMAGE_A, MANIFEST};

    #[test]
    fn mask_is_exactly_the_changed_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..4 {
            let (a, b, m) = synthesize_pair(&mut rng, 64, 0.25);
            for ((pa, pb), pm) in a.pixels().zip(b.pixels()).zip(m.pixels()) {
                let diff = pa.0.iter().zip(pb.0).map(|(&x, y)| x.abs_diff(y)).max().unwrap();
                if pm.0[0] == 0 {
                    assert_eq!(pa, pb);
                } else {
                    assert!(diff >= CHANGE_THRESHOLD);
                }
                assert_eq!(pm.0[0] == 255, diff >= CHANGE_THRESHOLD);
            }
        }
    }

    #[test]
    fn mean_coverage_near_target() {
        for fraction in [0.1, 0.25] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mean: f64 = (0..32)
                .map(|_| {
                    let (_, _, m) = synthesize_pair(&mut rng, 64, fraction);
                    m.pixels().filter(|p| p.0[0] == 255).count() as f64 / 4096.0
                })
                .sum::<f64>()
                / 32.0;
            assert!((mean / fraction - 1.0).abs() <= 0.2, "fraction {fraction}: mean coverage {mean}");
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SyntheticConfig { n_pairs: 6, size: 32, patches_per_site: 2, ..SyntheticConfig::default() };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = generate_synthetic_dataset(d1.path(), &cfg).unwrap();
        let m2 = generate_synthetic_dataset(d2.path(), &cfg).unwrap();
        assert_eq!(m1, m2);
        for (site, patches) in &m1.sites {
            for p in patches {
                let rel = Path::new(site).join(p).join(IMAGE_A);
                assert_eq!(std::fs::read(d1.path().join(&rel)).unwrap(), std::fs::read(d2.path().join(&rel)).unwrap());
            }
        }
        assert_eq!(std::fs::read(d1.path().join(MANIFEST)).unwrap(), std::fs::read(d2.path().join(MANIFEST)).unwrap());
        let ds = Dataset::open(d1.path()).unwrap();
        let total: usize = Split::ALL.iter().map(|&s| ds.ids(s).len()).sum();
        assert_eq!(total, 6);
        assert_eq!(ds.manifest.sites.len(), 3);
    }
}

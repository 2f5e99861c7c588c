//! Synthetic chest phantoms with exact ground truth.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use super::metaimage::{load_label_image, load_metaimage, write_metaimage, VoxelData};
use super::{parse_annotations, write_annotations, Malignancy, NoduleAnnotation};
use crate::error::{Error, Result};
use crate::imaging::{binarize_lung_mask, CtVolume, Geometry, LungMask};

const PLACEMENT_ATTEMPTS: usize = 500;
const PLACEMENT_RESTARTS: usize = 20;
const SPIKE_COUNT: usize = 10;
const SPIKE_GAIN: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub cube_size: usize,
    pub nodule_count: usize,
    /// Isotropic voxel spacing in mm.
    pub spacing: f64,
    pub air_hu: f32,
    pub body_hu: f32,
    pub lung_hu: f32,
    pub nodule_hu: f32,
    pub noise_std: f32,
    /// Fraction of nodules labelled malignant.
    pub malignant_fraction: f64,
    /// Fraction of nodules whose centre lies within one radius of the lung surface.
    pub near_surface_fraction: f64,
    /// Diameter ranges as fractions of `cube_size`.
    pub benign_diameter: [f64; 2],
    pub malignant_diameter: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            cube_size: 64,
            nodule_count: 3,
            spacing: 1.0,
            air_hu: -1000.0,
            body_hu: 40.0,
            lung_hu: -850.0,
            nodule_hu: 60.0,
            noise_std: 15.0,
            malignant_fraction: 0.5,
            near_surface_fraction: 0.2,
            benign_diameter: [0.05, 0.08],
            malignant_diameter: [0.11, 0.15],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.cube_size < 32 {
            return bad(format!("cube_size {} is below 32", self.cube_size));
        }
        if !(self.nodule_hu > self.lung_hu) {
            return bad("nodule intensity must exceed lung intensity".into());
        }
        if !(self.spacing > 0.0) || !(self.noise_std >= 0.0) {
            return bad("spacing must be positive and noise non-negative".into());
        }
        for f in [self.malignant_fraction, self.near_surface_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("fraction {f} outside [0, 1]"));
            }
        }
        for [lo, hi] in [self.benign_diameter, self.malignant_diameter] {
            if !(lo > 0.0 && lo <= hi && hi < 0.5) {
                return bad(format!("diameter range [{lo}, {hi}] is invalid"));
            }
        }
        Ok(())
    }

    pub fn series_id(&self) -> String {
        format!("phantom-{}", self.seed)
    }
}

/// Axis-aligned ellipsoid in voxel coordinates `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.iter().product::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: CtVolume,
    pub mask: LungMask,
    pub annotations: Vec<NoduleAnnotation>,
    pub lungs: [Ellipsoid; 2],
    pub body: Ellipsoid,
}

struct Placed {
    center: [f64; 3],
    radius: f64,
    reach: f64,
    spikes: Option<Vec<[f64; 3]>>,
}

fn voxel_centre(i: usize, j: usize, k: usize) -> [f64; 3] {
    [i as f64, j as f64, k as f64]
}

/// Grid indices of voxel centres within `radius` of `c`, clipped to the grid.
fn ball(c: [f64; 3], radius: f64, n: usize) -> impl Iterator<Item = [usize; 3]> {
    let lo = c.map(|v| (v - radius).floor().max(0.0) as usize);
    let hi = c.map(|v| ((v + radius).ceil().max(0.0) as usize).min(n - 1));
    (lo[0]..=hi[0]).flat_map(move |z| {
        (lo[1]..=hi[1]).flat_map(move |y| (lo[2]..=hi[2]).map(move |x| [z, y, x])).filter(move |&[z, y, x]| {
            let p = voxel_centre(z, y, x);
            (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= radius * radius
        })
    })
}

fn ball_is_clipped(c: [f64; 3], radius: f64, n: usize) -> bool {
    c.iter().any(|&v| v - radius < 0.0 || v + radius > (n - 1) as f64)
}

fn spiculated_radius(dir: [f64; 3], radius: f64, spikes: &[[f64; 3]]) -> f64 {
    let peak = spikes.iter().map(|u| (dir[0] * u[0] + dir[1] * u[1] + dir[2] * u[2]).max(0.0).powi(12)).fold(0.0, f64::max);
    radius * (1.0 + SPIKE_GAIN * peak)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.cube_size;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mid = (nf - 1.0) / 2.0;
    let mut jitter = |scale: f64| 1.0 + rng.random_range(-scale..scale);

    let body = Ellipsoid { center: [mid; 3], semi_axes: [0.45 * nf, 0.38 * nf, 0.45 * nf] };
    let mut lungs = [body; 2];
    for (i, side) in [-1.0, 1.0].into_iter().enumerate() {
        lungs[i] = Ellipsoid {
            center: [mid, mid, mid + side * 0.2 * nf * jitter(0.03)],
            semi_axes: [0.34 * nf * jitter(0.05), 0.26 * nf * jitter(0.05), 0.16 * nf * jitter(0.05)],
        };
    }

    let mut lung_label = Array3::<u8>::zeros((n, n, n));
    let mut body_mask = Array3::<bool>::from_elem((n, n, n), false);
    for ((z, y, x), l) in lung_label.indexed_iter_mut() {
        let p = voxel_centre(z, y, x);
        body_mask[[z, y, x]] = body.contains(p);
        if lungs[0].contains(p) {
            *l = 3;
        } else if lungs[1].contains(p) {
            *l = 4;
        }
    }
    let in_lung = |p: [usize; 3]| lung_label[p] != 0;

    // malignant nodules first: large ones are hardest to pack
    let n_malignant = (spec.malignant_fraction * spec.nodule_count as f64).round() as usize;
    let n_near = (spec.near_surface_fraction * spec.nodule_count as f64).round() as usize;
    let labels: Vec<Malignancy> = (0..spec.nodule_count).map(|i| if i < n_malignant { Malignancy::Malignant } else { Malignancy::Benign }).collect();
    let mut near: Vec<bool> = (0..spec.nodule_count).map(|i| i < n_near).collect();
    near.shuffle(&mut rng);

    let mut placed: Vec<Placed> = Vec::new();
    let mut most_placed = 0;
    for _ in 0..PLACEMENT_RESTARTS {
        placed.clear();
        for (&label, &near_surface) in labels.iter().zip(&near) {
            let range = match label {
                Malignancy::Benign => spec.benign_diameter,
                Malignancy::Malignant => spec.malignant_diameter,
            };
            let radius = 0.5 * nf * rng.random_range(range[0]..=range[1]);
            let spikes: Option<Vec<[f64; 3]>> =
                (label == Malignancy::Malignant).then(|| (0..SPIKE_COUNT).map(|_| UnitSphere.sample(&mut rng)).collect());
            let reach = if spikes.is_some() { radius * (1.0 + SPIKE_GAIN) } else { radius };
            let mut ok = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let lung = &lungs[rng.random_range(0..2)];
                let c: [f64; 3] = std::array::from_fn(|a| lung.center[a] + rng.random_range(-1.0..1.0) * lung.semi_axes[a]);
                if ball_is_clipped(c, reach, n) || !lung.contains(c) {
                    continue;
                }
                if placed.iter().any(|p| (0..3).map(|a| (p.center[a] - c[a]).powi(2)).sum::<f64>().sqrt() <= p.reach + reach + 1.0) {
                    continue;
                }
                if !in_lung(c.map(|v| v.round() as usize)) {
                    continue;
                }
                let inside_lung = ball(c, radius, n).all(in_lung);
                let accept = if near_surface { !inside_lung && ball(c, reach, n).all(|p| body_mask[p]) } else { inside_lung };
                if accept {
                    ok = Some(c);
                    break;
                }
            }
            match ok {
                Some(center) => placed.push(Placed { center, radius, reach, spikes }),
                None => break,
            }
        }
        most_placed = most_placed.max(placed.len());
        if placed.len() == spec.nodule_count {
            break;
        }
    }
    if placed.len() < spec.nodule_count {
        return Err(Error::Unplaceable { requested: spec.nodule_count, placed: most_placed });
    }

    let mut hu = Array3::<f32>::from_elem((n, n, n), spec.air_hu);
    for ((idx, v), &b) in hu.indexed_iter_mut().zip(body_mask.iter()) {
        if b {
            *v = if lung_label[idx] != 0 { spec.lung_hu } else { spec.body_hu };
        }
    }
    for p in &placed {
        for idx in ball(p.center, p.reach, n) {
            if !body_mask[idx] {
                continue;
            }
            let inside = match &p.spikes {
                None => true,
                Some(spikes) => {
                    let v = voxel_centre(idx[0], idx[1], idx[2]);
                    let d: [f64; 3] = std::array::from_fn(|a| v[a] - p.center[a]);
                    let len = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                    len == 0.0 || len <= spiculated_radius(d.map(|x| x / len), p.radius, spikes)
                }
            };
            if inside {
                hu[idx] = spec.nodule_hu;
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_std).expect("finite std");
        for v in hu.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    hu.mapv_inplace(|v| v.round().clamp(f32::from(i16::MIN), f32::from(i16::MAX)));

    let s = spec.spacing;
    let origin = [-mid * s + 10.0, -mid * s - 5.0, -mid * s + 2.5];
    let geometry = Geometry::new([s; 3], origin)?;
    let series_id = spec.series_id();
    let annotations = placed
        .iter()
        .zip(&labels)
        .map(|(p, &label)| NoduleAnnotation {
            series_id: series_id.clone(),
            center: geometry.voxel_to_world(p.center),
            diameter: 2.0 * p.radius * s,
            malignancy: Some(label),
        })
        .collect();
    let volume = CtVolume::new(hu, geometry)?;
    let mask = binarize_lung_mask(&lung_label.mapv(i32::from), geometry)?;
    Ok(Phantom { volume, mask, annotations, lungs, body })
}

/// Manifest stored beside each phantom bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub series_id: String,
    pub seed: u64,
    pub spec: PhantomSpec,
    pub files: Vec<String>,
}

pub const BUNDLE_VOLUME: &str = "volume.mhd";
pub const BUNDLE_MASK: &str = "mask.mhd";
pub const BUNDLE_ANNOTATIONS: &str = "annotations.csv";
pub const BUNDLE_MANIFEST: &str = "manifest.json";

/// Write volume (MET_SHORT), lung labels (3 = left, 4 = right), annotations
/// and a manifest into `dir`.
pub fn write_phantom_bundle(dir: &Path, phantom: &Phantom, spec: &PhantomSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = phantom.volume.geometry();
    let hu = phantom.volume.voxels().mapv(|v| v as i16);
    write_metaimage(&dir.join(BUNDLE_VOLUME), VoxelData::Short(&hu), &g)?;
    let centre_x = (phantom.lungs[0].center[2] + phantom.lungs[1].center[2]) / 2.0;
    let labels = Array3::from_shape_fn(phantom.mask.voxels().raw_dim(), |(z, y, x)| match phantom.mask.voxels()[[z, y, x]] {
        0 => 0u8,
        _ if (x as f64) < centre_x => 3,
        _ => 4,
    });
    write_metaimage(&dir.join(BUNDLE_MASK), VoxelData::UChar(&labels), &g)?;
    write_annotations(&dir.join(BUNDLE_ANNOTATIONS), &phantom.annotations)?;
    let manifest = PhantomManifest {
        series_id: spec.series_id(),
        seed: spec.seed,
        spec: spec.clone(),
        files: [BUNDLE_VOLUME, "volume.raw", BUNDLE_MASK, "mask.raw", BUNDLE_ANNOTATIONS].map(String::from).to_vec(),
    };
    let path = dir.join(BUNDLE_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// A bundle as read back from disk.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub series_id: String,
    pub volume: CtVolume,
    pub mask: LungMask,
    pub annotations: Vec<NoduleAnnotation>,
}

pub fn read_phantom_bundle(dir: &Path) -> Result<Bundle> {
    let volume = load_metaimage(&dir.join(BUNDLE_VOLUME))?;
    let (labels, g) = load_label_image(&dir.join(BUNDLE_MASK))?;
    let mask = binarize_lung_mask(&labels, g)?;
    mask.check_aligned(&volume)?;
    let annotations = parse_annotations(&dir.join(BUNDLE_ANNOTATIONS))?;
    let manifest_path = dir.join(BUNDLE_MANIFEST);
    let series_id = match fs::read_to_string(&manifest_path) {
        Ok(text) => serde_json::from_str::<PhantomManifest>(&text)?.series_id,
        Err(_) => dir.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
    };
    Ok(Bundle { series_id, volume, mask, annotations })
}

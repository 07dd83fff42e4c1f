//! Synthetic multi-modal segmentation data and the `PASS` container format.
//!
//! Label maps are nested ellipses (ellipsoids in 3D): the region of class
//! `k + 1` lies inside the region of class `k`. Each modality renders only
//! the classes its profile marks visible; invisible classes take the
//! background intensity.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kv::{join_list, KvMap};
use crate::tensor::{Spatial, Tensor};

/// How a modality renders the label classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityProfile {
    /// `visible[k]` for every class; entry 0 (background) is ignored.
    pub visible: Vec<bool>,
    /// Intensity step between consecutive visible classes.
    pub contrast: f64,
}

impl ModalityProfile {
    pub fn all_visible(n_classes: usize) -> Self {
        let classes: Vec<usize> = (1..n_classes).collect();
        Self::seeing(n_classes, &classes, 1.0)
    }

    /// Profile seeing exactly the listed foreground classes.
    pub fn seeing(n_classes: usize, classes: &[usize], contrast: f64) -> Self {
        let mut visible = vec![false; n_classes];
        for &k in classes {
            if k < n_classes {
                visible[k] = true;
            }
        }
        Self { visible, contrast }
    }

    /// Raw (pre-normalization) intensity of class `k`.
    pub fn intensity(&self, k: usize) -> f64 {
        if k > 0 && self.visible[k] {
            self.contrast * k as f64
        } else {
            0.0
        }
    }

    fn visible_classes(&self) -> Vec<usize> {
        (1..self.visible.len()).filter(|&k| self.visible[k]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub n_modalities: usize,
    pub n_classes: usize,
    pub shape: Spatial,
    pub profiles: Vec<ModalityProfile>,
    pub noise: f64,
    pub seed: u64,
}

/// Outer-region radius range as a fraction of each axis length.
const OUTER_RADIUS: (f64, f64) = (0.2, 0.35);
/// Radius shrink factor from one nested class to the next.
const NESTED_SHRINK: (f64, f64) = (0.45, 0.65);

impl DatasetSpec {
    /// Three modalities, three classes, 2D. Modality 0 sees every class,
    /// modality 1 is blind to the innermost class, modality 2 sees every
    /// class at reduced contrast.
    pub fn desk_default(n_samples: usize, side: usize, seed: u64) -> Self {
        Self {
            n_samples,
            n_modalities: 3,
            n_classes: 3,
            shape: Spatial::new_2d(side, side),
            profiles: vec![
                ModalityProfile::seeing(3, &[1, 2], 1.0),
                ModalityProfile::seeing(3, &[1], 1.0),
                ModalityProfile::seeing(3, &[1, 2], 0.8),
            ],
            noise: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("n_classes must be >= 2".into()));
        }
        if self.n_modalities < 2 {
            return Err(Error::InvalidArgument("n_modalities must be >= 2".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidArgument("noise must be >= 0".into()));
        }
        if self.profiles.len() != self.n_modalities {
            return Err(Error::InvalidArgument(format!(
                "{} profiles for {} modalities",
                self.profiles.len(),
                self.n_modalities
            )));
        }
        if self.profiles.iter().any(|p| p.visible.len() != self.n_classes) {
            return Err(Error::InvalidArgument(
                "profile visibility length differs from n_classes".into(),
            ));
        }
        let min_side = 4 * self.n_classes;
        let mut axes = vec![self.shape.h, self.shape.w];
        if self.shape.rank() == 3 {
            axes.push(self.shape.d);
        }
        if axes.iter().any(|&a| a < min_side) {
            return Err(Error::InvalidArgument(format!(
                "spatial shape {} too small for {} nested regions (need each axis >= {})",
                self.shape,
                self.n_classes - 1,
                min_side
            )));
        }
        Ok(())
    }

    /// Band the foreground (label > 0) pixel fraction of every sample falls in.
    pub fn foreground_band(&self) -> (f64, f64) {
        let (lo, hi) = OUTER_RADIUS;
        if self.shape.rank() == 3 {
            let c = 4.0 / 3.0 * std::f64::consts::PI;
            (0.6 * c * lo.powi(3), 1.2 * c * hi.powi(3))
        } else {
            let c = std::f64::consts::PI;
            (0.6 * c * lo * lo, 1.2 * c * hi * hi)
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("n_samples", self.n_samples);
        kv.set("n_modalities", self.n_modalities);
        kv.set("n_classes", self.n_classes);
        kv.set("shape", self.shape);
        kv.set("noise", self.noise);
        kv.set("seed", self.seed);
        for (m, p) in self.profiles.iter().enumerate() {
            kv.set(&format!("visible.m{m}"), join_list(&p.visible_classes()));
            kv.set(&format!("contrast.m{m}"), p.contrast);
        }
        kv
    }

    /// Reads a spec from a flat key-value map. Missing profile keys default
    /// to every class visible at contrast 1.
    pub fn from_kv(kv: &KvMap, prefix: &str) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let n_samples = kv
            .get(&key("n_samples"))?
            .ok_or_else(|| Error::Config(format!("missing `{}`", key("n_samples"))))?;
        let n_modalities = kv.get_or(&key("n_modalities"), 3usize)?;
        let n_classes = kv.get_or(&key("n_classes"), 3usize)?;
        let shape = match kv.get_str(&key("shape")) {
            Some(s) => parse_shape(s)?,
            None => Spatial::new_2d(32, 32),
        };
        let noise = kv.get_or(&key("noise"), 0.3f64)?;
        let seed = kv.get_or(&key("seed"), 0u64)?;
        let mut profiles = Vec::with_capacity(n_modalities);
        for m in 0..n_modalities {
            let contrast = kv.get_or(&key(&format!("contrast.m{m}")), 1.0f64)?;
            let profile = match kv.get_list::<usize>(&key(&format!("visible.m{m}")))? {
                Some(classes) => {
                    if let Some(&bad) = classes.iter().find(|&&k| k == 0 || k >= n_classes) {
                        return Err(Error::Config(format!(
                            "visible.m{m}: class {bad} is not a foreground class"
                        )));
                    }
                    ModalityProfile::seeing(n_classes, &classes, contrast)
                }
                None => ModalityProfile {
                    contrast,
                    ..ModalityProfile::all_visible(n_classes)
                },
            };
            profiles.push(profile);
        }
        let spec = Self {
            n_samples,
            n_modalities,
            n_classes,
            shape,
            profiles,
            noise,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Parses `HxW` or `DxHxW`.
pub fn parse_shape(s: &str) -> Result<Spatial> {
    let dims = s
        .split('x')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("shape `{s}`: {e}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    match dims.as_slice() {
        [h, w] if *h > 0 && *w > 0 => Ok(Spatial::new_2d(*h, *w)),
        [d, h, w] if *d > 1 && *h > 0 && *w > 0 => Ok(Spatial::new_3d(*d, *h, *w)),
        _ => Err(Error::Parse(format!("shape `{s}` is not HxW or DxHxW"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalSample {
    pub shape: Spatial,
    /// One entry per modality; `None` once the modality has been dropped.
    pub images: Vec<Option<Vec<f32>>>,
    pub label: Vec<u8>,
    pub presence: Vec<u8>,
}

impl MultiModalSample {
    pub fn n_modalities(&self) -> usize {
        self.images.len()
    }

    pub fn available(&self) -> Vec<usize> {
        (0..self.images.len())
            .filter(|&m| self.presence[m] == 1 && self.images[m].is_some())
            .collect()
    }

    /// Single-channel input tensors, `None` for absent modalities.
    pub fn input_tensors(&self) -> Vec<Option<Tensor>> {
        self.images
            .iter()
            .zip(&self.presence)
            .map(|(img, &p)| match (img, p) {
                (Some(v), 1) => Some(
                    Tensor::from_vec(1, self.shape, v.iter().map(|&x| x as f64).collect())
                        .expect("image matches sample shape"),
                ),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let vol = self.shape.volume();
        if self.label.len() != vol {
            return Err(Error::ShapeMismatch("label volume".into()));
        }
        if self.presence.len() != self.images.len() {
            return Err(Error::ShapeMismatch("presence row length".into()));
        }
        for (m, img) in self.images.iter().enumerate() {
            match img {
                Some(v) if v.len() != vol => {
                    return Err(Error::ShapeMismatch(format!("image of modality {m}")))
                }
                Some(_) if self.presence[m] == 0 => {
                    return Err(Error::InvalidArgument(format!(
                        "modality {m} stored but marked absent"
                    )))
                }
                None if self.presence[m] == 1 => {
                    return Err(Error::InvalidArgument(format!(
                        "modality {m} marked present but not stored"
                    )))
                }
                _ => {}
            }
        }
        if let Some(&bad) = self.label.iter().find(|&&k| k as usize >= n_classes) {
            return Err(Error::InvalidArgument(format!("label value {bad} >= K")));
        }
        Ok(())
    }
}

struct Region {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Region {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
        let mut s = 0.0;
        for a in 0..3 {
            let t = (p[a] - self.center[a]) / self.radii[a];
            s += t * t;
        }
        s <= 1.0
    }
}

fn sample_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn generate_label(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let shape = spec.shape;
    let rank3 = shape.rank() == 3;
    let dims = [shape.d as f64, shape.h as f64, shape.w as f64];

    let mut regions: Vec<Region> = Vec::with_capacity(spec.n_classes - 1);
    let mut radii = [0.0; 3];
    let mut center = [0.0; 3];
    for a in 0..3 {
        if a == 0 && !rank3 {
            radii[a] = f64::INFINITY;
            center[a] = 0.5;
            continue;
        }
        radii[a] = rng.gen_range(OUTER_RADIUS.0..OUTER_RADIUS.1) * dims[a];
        let margin = radii[a] + 1.0;
        center[a] = if dims[a] - margin > margin {
            rng.gen_range(margin..dims[a] - margin)
        } else {
            dims[a] / 2.0
        };
    }
    regions.push(Region { center, radii });

    for _ in 2..spec.n_classes {
        let outer = regions.last().expect("outer region");
        let mut radii = [0.0; 3];
        let mut center = [0.0; 3];
        for a in 0..3 {
            if a == 0 && !rank3 {
                radii[a] = f64::INFINITY;
                center[a] = 0.5;
                continue;
            }
            radii[a] = outer.radii[a] * rng.gen_range(NESTED_SHRINK.0..NESTED_SHRINK.1);
            let slack = 0.5 * (outer.radii[a] - radii[a]);
            center[a] = outer.center[a] + rng.gen_range(-slack..=slack);
        }
        regions.push(Region { center, radii });
    }

    let mut label = vec![0u8; shape.volume()];
    for z in 0..shape.d {
        for y in 0..shape.h {
            for x in 0..shape.w {
                let mut k = 0u8;
                for (r, region) in regions.iter().enumerate() {
                    if region.contains(z, y, x) {
                        k = (r + 1) as u8;
                    } else {
                        break;
                    }
                }
                label[shape.index(z, y, x)] = k;
            }
        }
    }

    // Tiny inner regions can miss every pixel centre; pin the class at the
    // pixel nearest its centre, which lies inside every enclosing region.
    for (r, region) in regions.iter().enumerate() {
        let k = (r + 1) as u8;
        if !label.contains(&k) {
            let z = if rank3 { region.center[0] as usize } else { 0 };
            let idx = shape.index(
                z.min(shape.d - 1),
                (region.center[1] as usize).min(shape.h - 1),
                (region.center[2] as usize).min(shape.w - 1),
            );
            label[idx] = k;
        }
    }
    label
}

fn normalize(image: &mut [f64]) {
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    for v in image.iter_mut() {
        *v = (*v - mean) * scale;
    }
}

/// Renders one sample deterministically from the spec seed and its index.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> MultiModalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));
    let label = generate_label(spec, &mut rng);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let images = spec
        .profiles
        .iter()
        .map(|profile| {
            let mut img: Vec<f64> = label
                .iter()
                .map(|&k| {
                    let base = profile.intensity(k as usize);
                    if spec.noise > 0.0 {
                        base + noise.sample(&mut rng)
                    } else {
                        base
                    }
                })
                .collect();
            normalize(&mut img);
            Some(img.into_iter().map(|v| v as f32).collect())
        })
        .collect();
    MultiModalSample {
        shape: spec.shape,
        images,
        label,
        presence: vec![1; spec.n_modalities],
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<MultiModalSample>> {
    spec.validate()?;
    Ok((0..spec.n_samples)
        .map(|i| generate_sample(spec, i))
        .collect())
}

/// Drops every modality whose entry in `row` is 0.
pub fn apply_presence(sample: &MultiModalSample, row: &[u8]) -> Result<MultiModalSample> {
    if row.len() != sample.n_modalities() {
        return Err(Error::ShapeMismatch(format!(
            "presence row of length {} for {} modalities",
            row.len(),
            sample.n_modalities()
        )));
    }
    if row.iter().all(|&v| v == 0) {
        return Err(Error::InvalidArgument("all-zero presence row".into()));
    }
    let mut out = sample.clone();
    for (m, &keep) in row.iter().enumerate() {
        if keep == 0 {
            out.images[m] = None;
            out.presence[m] = 0;
        } else if out.images[m].is_none() {
            return Err(Error::InvalidArgument(format!(
                "modality {m} requested but already dropped"
            )));
        }
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"PASS";
const VERSION: u8 = 1;
const DTYPE_F32_U8: u8 = 1;

/// Header of a `PASS` container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerHeader {
    pub n_records: usize,
    pub n_modalities: usize,
    pub n_classes: usize,
    pub shape: Spatial,
}

/// Writes samples as `PASS`, version, dtype, then little-endian u32 record
/// count, M, K, rank and dims, followed per record by the presence row,
/// f32 images of present modalities and the u8 label.
pub fn write_container<W: Write>(
    mut w: W,
    samples: &[MultiModalSample],
    n_modalities: usize,
    n_classes: usize,
    shape: Spatial,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F32_U8])?;
    let mut header = vec![
        samples.len() as u32,
        n_modalities as u32,
        n_classes as u32,
        shape.rank() as u32,
    ];
    if shape.rank() == 3 {
        header.push(shape.d as u32);
    }
    header.extend([shape.h as u32, shape.w as u32]);
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        if s.shape != shape || s.n_modalities() != n_modalities {
            return Err(Error::ShapeMismatch("record differs from container header".into()));
        }
        s.validate(n_classes)?;
        w.write_all(&s.presence)?;
        for img in s.images.iter().flatten() {
            let mut buf = Vec::with_capacity(img.len() * 4);
            for v in img {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.write_all(&s.label)?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Parse(format!("truncated file reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_container<R: Read>(mut r: R) -> Result<(ContainerHeader, Vec<MultiModalSample>)> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!("bad magic {magic:?}")));
    }
    let mut vd = [0u8; 2];
    read_exact_or(&mut r, &mut vd, "version")?;
    if vd[0] != VERSION {
        return Err(Error::Parse(format!("unsupported version {}", vd[0])));
    }
    if vd[1] != DTYPE_F32_U8 {
        return Err(Error::Parse(format!("unsupported dtype code {}", vd[1])));
    }
    let n_records = read_u32(&mut r, "record count")? as usize;
    let n_modalities = read_u32(&mut r, "M")? as usize;
    let n_classes = read_u32(&mut r, "K")? as usize;
    let rank = read_u32(&mut r, "rank")?;
    let shape = match rank {
        2 => {
            let h = read_u32(&mut r, "dims")? as usize;
            let w = read_u32(&mut r, "dims")? as usize;
            Spatial::new_2d(h, w)
        }
        3 => {
            let d = read_u32(&mut r, "dims")? as usize;
            let h = read_u32(&mut r, "dims")? as usize;
            let w = read_u32(&mut r, "dims")? as usize;
            Spatial::new_3d(d, h, w)
        }
        other => return Err(Error::Parse(format!("unsupported rank {other}"))),
    };
    if n_modalities == 0 || !(2..=256).contains(&n_classes) || shape.volume() == 0 {
        return Err(Error::Parse("implausible container header".into()));
    }
    let header = ContainerHeader {
        n_records,
        n_modalities,
        n_classes,
        shape,
    };
    let vol = shape.volume();
    let mut samples = Vec::with_capacity(n_records.min(1 << 16));
    for rec in 0..n_records {
        let mut presence = vec![0u8; n_modalities];
        read_exact_or(&mut r, &mut presence, "presence row")?;
        if presence.iter().any(|&v| v > 1) {
            return Err(Error::Parse(format!("record {rec}: non-binary presence")));
        }
        let mut images = Vec::with_capacity(n_modalities);
        for &p in &presence {
            if p == 1 {
                let mut buf = vec![0u8; vol * 4];
                read_exact_or(&mut r, &mut buf, "image payload")?;
                images.push(Some(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ));
            } else {
                images.push(None);
            }
        }
        let mut label = vec![0u8; vol];
        read_exact_or(&mut r, &mut label, "label payload")?;
        let sample = MultiModalSample {
            shape,
            images,
            label,
            presence,
        };
        sample
            .validate(n_classes)
            .map_err(|e| Error::Parse(format!("record {rec}: {e}")))?;
        samples.push(sample);
    }
    Ok((header, samples))
}

pub fn save_container(
    path: &Path,
    samples: &[MultiModalSample],
    n_modalities: usize,
    n_classes: usize,
    shape: Spatial,
) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, samples, n_modalities, n_classes, shape)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<(ContainerHeader, Vec<MultiModalSample>)> {
    let bytes = fs::read(path)?;
    read_container(bytes.as_slice())
}

//! Deterministic synthetic paired-image dataset.
//!
//! Each lesion is an ellipse perturbed by radial harmonics, shaded with two
//! sinusoidal texture fields: a coarse planar wave that rotates with the
//! lesion and fine concentric rings anchored at its centre. The clinical view
//! shows the lesion at about a third of the frame on mottled skin with camera
//! noise and strongly attenuated rings; the dermoscopic view fills the frame.

use crate::imaging::{Image, ImageError};
use crate::kv::{KvDoc, KvError};
use crate::seeds::derive_seed;
use crate::taxonomy::{
    load_taxonomy, partition_subsets, split_id_ood, split_train_test, write_manifest, LabelPath,
    LesionRecord, RecordLabel, Split, SplitConfig, SubsetPartition, SubsetThresholds, Taxonomy,
    TaxonomyError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Fine-texture amplitude in the dermoscopic view.
pub const FINE_AMPLITUDE: f64 = 0.25;
/// Divisor applied to the fine-texture amplitude in the clinical view.
pub const CLINICAL_FINE_ATTENUATION: f64 = 8.0;
pub const COARSE_AMPLITUDE: f64 = 0.22;
pub const CLINICAL_NOISE_SIGMA: f64 = 0.03;
/// Lesion radius as a fraction of the frame, per view.
pub const CLINICAL_RADIUS: f64 = 1.0 / 6.0;
pub const DERMOSCOPIC_RADIUS: f64 = 0.40;

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("unknown corruption kind `{0}`")]
    UnknownKind(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

pub type Result<T> = std::result::Result<T, GenError>;

/// Appearance parameters of one level-3 category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryParams {
    /// Base hue in `[0, 1)`.
    pub hue: f64,
    /// Shape eccentricity in `[0, 0.9]`.
    pub eccentricity: f64,
    /// Relative radial-harmonic amplitude in `[0, 0.5]`.
    pub border: f64,
    /// Coarse texture cycles per lesion radius, `[0, 4]`.
    pub coarse: f64,
    /// Fine ring cycles per lesion radius, `[0, 12]`.
    pub fine: f64,
}

impl CategoryParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("hue", self.hue, 0.0, 1.0),
            ("eccentricity", self.eccentricity, 0.0, 0.9),
            ("border", self.border, 0.0, 0.5),
            ("coarse", self.coarse, 0.0, 4.0),
            ("fine", self.fine, 0.0, 12.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(GenError::InvalidSpec(format!(
                    "{name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for CategoryParams {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| GenError::InvalidSpec(format!("bad parameter list `{s}`")))?;
        if v.len() != 5 {
            return Err(GenError::InvalidSpec(format!(
                "expected 5 parameters (hue eccentricity border coarse fine), got {}",
                v.len()
            )));
        }
        let p = Self {
            hue: v[0],
            eccentricity: v[1],
            border: v[2],
            coarse: v[3],
            fine: v[4],
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategorySpec {
    pub level1: String,
    pub level2: String,
    pub name: String,
    pub count: u64,
    /// Shape parameters; for blends, the midpoint of the two parents.
    pub params: CategoryParams,
    /// Parent categories whose pigment patterns this category mixes.
    pub blend: Option<(String, String)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionConfig {
    /// Box-blur radius as a fraction of the image size (three passes).
    pub blur_radius: f64,
    /// Minimum fraction of lesion pixels covered by the occluding patch.
    pub occlusion_fraction: f64,
    /// Contrast gain before clipping.
    pub saturation_gain: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            blur_radius: 0.08,
            occlusion_fraction: 0.5,
            saturation_gain: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub image_size: usize,
    pub patients: u64,
    pub seed: u64,
    pub level1: Vec<String>,
    pub categories: Vec<CategorySpec>,
    /// Sibling pairs that differ only in fine texture.
    pub ambiguous: Vec<(String, String)>,
    pub ood_cutoff: u64,
    pub ood_percentile: f64,
    pub subset_thresholds: SubsetThresholds,
    pub unknown_per_kind: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub corruption: CorruptionConfig,
}

const SPEC_KEYS: &[&str] = &[
    "image_size",
    "patients",
    "seed",
    "level1",
    "category",
    "ambiguous",
    "ood_cutoff",
    "ood_percentile",
    "subset_thresholds",
    "unknown_per_kind",
    "test_fraction",
    "val_fraction",
    "blur_radius",
    "occlusion_fraction",
    "saturation_gain",
];

/// The shipped desk-scale spec.
pub const MINI_SPEC: &str = include_str!("../data/mini.spec");

impl GenSpec {
    pub fn mini() -> Self {
        Self::parse(MINI_SPEC).expect("shipped spec parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        doc.check_keys(SPEC_KEYS)?;
        let mut categories = Vec::new();
        for line in doc.get_all("category") {
            let f: Vec<&str> = line.split('|').map(str::trim).collect();
            if f.len() != 5 {
                return Err(GenError::InvalidSpec(format!(
                    "category needs `level1 | level2 | name | count | params`: `{line}`"
                )));
            }
            let count = f[3]
                .parse()
                .map_err(|_| GenError::InvalidSpec(format!("bad count `{}`", f[3])))?;
            let (params, blend) = match f[4].strip_prefix("blend ") {
                Some(rest) => {
                    let (a, b) = rest
                        .split_once('+')
                        .ok_or_else(|| GenError::InvalidSpec(format!("blend needs `a + b`: `{line}`")))?;
                    let placeholder = CategoryParams {
                        hue: 0.0,
                        eccentricity: 0.0,
                        border: 0.0,
                        coarse: 0.0,
                        fine: 0.0,
                    };
                    (placeholder, Some((a.trim().to_string(), b.trim().to_string())))
                }
                None => (f[4].parse()?, None),
            };
            categories.push(CategorySpec {
                level1: f[0].to_string(),
                level2: f[1].to_string(),
                name: f[2].to_string(),
                count,
                params,
                blend,
            });
        }
        let plain = categories.clone();
        for c in &mut categories {
            if let Some((a, b)) = &c.blend {
                let find = |n: &str| {
                    plain
                        .iter()
                        .find(|p| p.name == n && p.blend.is_none())
                        .map(|p| p.params)
                        .ok_or_else(|| GenError::InvalidSpec(format!("blend parent `{n}` is not a plain category")))
                };
                let (pa, pb) = (find(a)?, find(b)?);
                c.params = CategoryParams {
                    hue: pa.hue,
                    eccentricity: (pa.eccentricity + pb.eccentricity) / 2.0,
                    border: (pa.border + pb.border) / 2.0,
                    coarse: (pa.coarse + pb.coarse) / 2.0,
                    fine: (pa.fine + pb.fine) / 2.0,
                };
            }
        }
        let mut ambiguous = Vec::new();
        for line in doc.get_all("ambiguous") {
            let (a, b) = line
                .split_once('|')
                .ok_or_else(|| GenError::InvalidSpec(format!("ambiguous needs `a | b`: `{line}`")))?;
            ambiguous.push((a.trim().to_string(), b.trim().to_string()));
        }
        let thresholds = match doc.get("subset_thresholds") {
            None => SubsetThresholds::default(),
            Some(s) => s.parse()?,
        };
        let defaults = CorruptionConfig::default();
        let spec = Self {
            image_size: doc.parse_or("image_size", 64)?,
            patients: doc.parse_or("patients", 1500)?,
            seed: doc.parse_or("seed", 0)?,
            level1: doc.get_all("level1").map(str::to_string).collect(),
            categories,
            ambiguous,
            ood_cutoff: doc.parse_or("ood_cutoff", 100)?,
            ood_percentile: doc.parse_or("ood_percentile", 0.25)?,
            subset_thresholds: thresholds,
            unknown_per_kind: doc.parse_or("unknown_per_kind", 0)?,
            test_fraction: doc.parse_or("test_fraction", 0.15)?,
            val_fraction: doc.parse_or("val_fraction", 0.2)?,
            corruption: CorruptionConfig {
                blur_radius: doc.parse_or("blur_radius", defaults.blur_radius)?,
                occlusion_fraction: doc.parse_or("occlusion_fraction", defaults.occlusion_fraction)?,
                saturation_gain: doc.parse_or("saturation_gain", defaults.saturation_gain)?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GenError::InvalidSpec(m));
        if !(8..=1024).contains(&self.image_size) {
            return bad(format!("image_size {} outside [8, 1024]", self.image_size));
        }
        if self.patients == 0 {
            return bad("patients must be positive".into());
        }
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        for c in &self.categories {
            c.params.validate()?;
        }
        for (a, b) in &self.ambiguous {
            let find = |n: &str| self.categories.iter().find(|c| c.name == n);
            let (Some(ca), Some(cb)) = (find(a), find(b)) else {
                return bad(format!("ambiguous pair `{a}`/`{b}` names unknown categories"));
            };
            if ca.level2 != cb.level2 {
                return bad(format!("ambiguous pair `{a}`/`{b}` are not siblings"));
            }
            if ca.params.fine == cb.params.fine {
                return bad(format!("ambiguous pair `{a}`/`{b}` share fine texture"));
            }
        }
        self.taxonomy()?;
        Ok(())
    }

    /// Taxonomy with counts and ID flags from the spec's cutoff rule.
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let mut doc = String::new();
        for l1 in &self.level1 {
            doc.push_str(&format!("level1\t{l1}\t-\n"));
        }
        let mut seen2: Vec<&str> = Vec::new();
        for c in &self.categories {
            if !seen2.contains(&c.level2.as_str()) {
                seen2.push(&c.level2);
                doc.push_str(&format!("level2\t{}\t{}\n", c.level2, c.level1));
            }
        }
        for c in &self.categories {
            doc.push_str(&format!("level3\t{}\t{}\t{}\n", c.name, c.level2, c.count));
        }
        let mut t = load_taxonomy(&doc)?;
        for c in &self.categories {
            let p = t.path_of(t.level3_index(&c.name).expect("just inserted"));
            if t.level1[p.l1] != c.level1 {
                return Err(GenError::InvalidSpec(format!(
                    "`{}` has inconsistent level-1 parent",
                    c.level2
                )));
            }
        }
        let (id, _) = split_id_ood(&t.count_vector(), self.ood_cutoff, self.ood_percentile)?;
        t.apply_id_set(&id);
        Ok(t)
    }

    pub fn partition(&self) -> Result<SubsetPartition> {
        let t = self.taxonomy()?;
        Ok(partition_subsets(&t.count_vector(), &t.id_flags, self.subset_thresholds)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub clinical: Image,
    pub dermoscopic: Image,
}

impl ImagePair {
    pub fn is_valid(&self) -> bool {
        self.clinical.size == self.dermoscopic.size
            && self.clinical.is_finite_unit()
            && self.dermoscopic.is_finite_unit()
    }
}

/// Geometry of the lesion as drawn in one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewGeometry {
    pub center_x: f64,
    pub center_y: f64,
    /// Major semi-axis in pixels.
    pub radius: f64,
    pub rotation: f64,
    pub eccentricity: f64,
}

impl ViewGeometry {
    /// Radius of the unperturbed ellipse at polar angle `phi`, in pixels.
    pub fn ellipse_radius(&self, phi: f64) -> f64 {
        let b = (1.0 - self.eccentricity * self.eccentricity).sqrt();
        let t = phi - self.rotation;
        self.radius * b / ((b * t.cos()).powi(2) + t.sin().powi(2)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedLesion {
    pub pair: ImagePair,
    pub clinical_mask: Vec<bool>,
    pub dermoscopic_mask: Vec<bool>,
    pub clinical_geometry: ViewGeometry,
    pub dermoscopic_geometry: ViewGeometry,
}

/// Per-instance jitter, drawn in a fixed order from the instance seed.
struct Instance {
    /// Jitter added to every pigment hue.
    hue_shift: f64,
    saturation: f64,
    value: f64,
    rotation: f64,
    scale: f64,
    offset: (f64, f64),
    harmonics: [(f64, f64); 4],
    coarse_dir: f64,
    coarse_phase: f64,
    skin: [f64; 3],
    mottle: [f64; 2],
}

impl Instance {
    fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n01 = Normal::new(0.0, 1.0).expect("unit normal");
        let hue_shift = 0.008 * n01.sample(&mut rng);
        let saturation = 0.55 + 0.04 * n01.sample(&mut rng);
        let value = 0.50 + 0.03 * n01.sample(&mut rng);
        let rotation = rng.random_range(0.0..PI);
        let scale = rng.random_range(0.92..1.08);
        let offset = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let mut harmonics = [(0.0, 0.0); 4];
        for h in &mut harmonics {
            *h = (rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI));
        }
        let coarse_dir = rng.random_range(0.0..2.0 * PI);
        let coarse_phase = rng.random_range(0.0..2.0 * PI);
        let skin = [
            0.86 + 0.03 * n01.sample(&mut rng),
            0.67 + 0.03 * n01.sample(&mut rng),
            0.56 + 0.03 * n01.sample(&mut rng),
        ];
        let mottle = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        Self {
            hue_shift,
            saturation,
            value,
            rotation,
            scale,
            offset,
            harmonics,
            coarse_dir,
            coarse_phase,
            skin,
            mottle,
        }
    }

    fn harmonic_factor(&self, border: f64, phi: f64) -> f64 {
        if border == 0.0 {
            return 1.0;
        }
        let mut s = 0.0;
        let mut w = 0.0;
        for (k, (a, psi)) in self.harmonics.iter().enumerate() {
            s += a * ((k as f64 + 3.0) * phi + psi).cos();
            w += a;
        }
        1.0 + border * s / w
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy, PartialEq)]
enum View {
    Clinical,
    Dermoscopic,
}

/// Pigment layers of a lesion: `(weight, params)`; weights sum to 1.
type Pigments = [(f64, CategoryParams)];

fn render_view(
    params: &CategoryParams,
    pigments: &Pigments,
    inst: &Instance,
    size: usize,
    view: View,
    noise_seed: u64,
) -> (Image, Vec<bool>, ViewGeometry) {
    let n = size as f64;
    let (radius_frac, offset_frac, fine_amp, mottle_amp) = match view {
        View::Clinical => (
            CLINICAL_RADIUS,
            0.06,
            FINE_AMPLITUDE / CLINICAL_FINE_ATTENUATION,
            0.05,
        ),
        View::Dermoscopic => (DERMOSCOPIC_RADIUS, 0.02, FINE_AMPLITUDE, 0.02),
    };
    let geom = ViewGeometry {
        center_x: n / 2.0 + inst.offset.0 * offset_frac * n,
        center_y: n / 2.0 + inst.offset.1 * offset_frac * n,
        radius: radius_frac * n * inst.scale,
        rotation: inst.rotation,
        eccentricity: params.eccentricity,
    };
    let (cd, sd) = (inst.coarse_dir.cos(), inst.coarse_dir.sin());
    let mut img = Image::filled(size, [0.0; 3]);
    let mut mask = vec![false; size * size];
    let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, CLINICAL_NOISE_SIGMA).expect("noise sigma");
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - geom.center_x;
            let dy = y as f64 + 0.5 - geom.center_y;
            let rho = dx.hypot(dy);
            let phi = dy.atan2(dx);
            let boundary = geom.ellipse_radius(phi) * inst.harmonic_factor(params.border, phi);
            let alpha = (boundary - rho + 0.5).clamp(0.0, 1.0);
            mask[y * size + x] = rho <= boundary;
            let rn = rho / geom.radius;
            let u = (dx * cd + dy * sd) / geom.radius;
            let mut lesion = [0.0; 3];
            for (w, p) in pigments {
                let shade = 1.0
                    + COARSE_AMPLITUDE * (2.0 * PI * p.coarse * u + inst.coarse_phase).sin()
                    + fine_amp * (2.0 * PI * p.fine * rn).sin();
                let hue = (p.hue + inst.hue_shift).rem_euclid(1.0);
                let rgb = hsv_to_rgb(hue, inst.saturation, inst.value * shade);
                for c in 0..3 {
                    lesion[c] += w * rgb[c];
                }
            }
            let m = 1.0
                + mottle_amp
                    * (2.0 * PI * 1.7 * x as f64 / n + inst.mottle[0]).sin()
                    * (2.0 * PI * 1.3 * y as f64 / n + inst.mottle[1]).sin();
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let mut v = alpha * lesion[c] + (1.0 - alpha) * inst.skin[c] * m;
                if view == View::Clinical {
                    v += normal.sample(&mut noise);
                }
                px[c] = v.clamp(0.0, 1.0) as f32;
            }
            img.set(y, x, px);
        }
    }
    (img, mask, geom)
}

/// Renders both views of one lesion instance, with masks and geometry.
pub fn render_lesion(params: &CategoryParams, size: usize, instance_seed: u64) -> RenderedLesion {
    render_layers(params, &[(1.0, *params)], size, instance_seed)
}

/// Renders a lesion whose pigment mixes the colour and texture patterns of
/// two parent categories, weighted `w : 1 - w` with `w ~ U(0.35, 0.65)`;
/// shape comes from `shape`.
pub fn render_blend_lesion(
    shape: &CategoryParams,
    a: &CategoryParams,
    b: &CategoryParams,
    size: usize,
    instance_seed: u64,
) -> RenderedLesion {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(instance_seed, "blend", 0));
    let w = rng.random_range(0.35..0.65);
    render_layers(shape, &[(w, *a), (1.0 - w, *b)], size, instance_seed)
}

fn render_layers(params: &CategoryParams, pigments: &Pigments, size: usize, instance_seed: u64) -> RenderedLesion {
    let inst = Instance::draw(instance_seed);
    let noise_seed = derive_seed(instance_seed, "camera-noise", 0);
    let (clinical, clinical_mask, clinical_geometry) =
        render_view(params, pigments, &inst, size, View::Clinical, noise_seed);
    let (dermoscopic, dermoscopic_mask, dermoscopic_geometry) =
        render_view(params, pigments, &inst, size, View::Dermoscopic, noise_seed);
    RenderedLesion {
        pair: ImagePair {
            clinical,
            dermoscopic,
        },
        clinical_mask,
        dermoscopic_mask,
        clinical_geometry,
        dermoscopic_geometry,
    }
}

pub fn render_lesion_pair(params: &CategoryParams, size: usize, instance_seed: u64) -> ImagePair {
    render_lesion(params, size, instance_seed).pair
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptKind {
    Blur,
    Occlusion,
    Saturation,
}

impl CorruptKind {
    pub const ALL: [CorruptKind; 3] = [CorruptKind::Blur, CorruptKind::Occlusion, CorruptKind::Saturation];

    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptKind::Blur => "blur",
            CorruptKind::Occlusion => "occlusion",
            CorruptKind::Saturation => "saturation",
        }
    }
}

impl FromStr for CorruptKind {
    type Err = GenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(CorruptKind::Blur),
            "occlusion" => Ok(CorruptKind::Occlusion),
            "saturation" => Ok(CorruptKind::Saturation),
            other => Err(GenError::UnknownKind(other.to_string())),
        }
    }
}

fn box_blur(img: &Image, radius: usize, passes: usize) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let n = img.size;
    let mut cur = img.clone();
    for _ in 0..passes {
        for horizontal in [true, false] {
            let mut next = cur.clone();
            for a in 0..n {
                for b in 0..n {
                    let mut acc = [0.0f32; 3];
                    for k in -(radius as isize)..=(radius as isize) {
                        let t = (b as isize + k).clamp(0, n as isize - 1) as usize;
                        let (y, x) = if horizontal { (a, t) } else { (t, a) };
                        let p = cur.get(y, x);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                    let w = (2 * radius + 1) as f32;
                    let (y, x) = if horizontal { (a, b) } else { (b, a) };
                    next.set(y, x, [acc[0] / w, acc[1] / w, acc[2] / w]);
                }
            }
            cur = next;
        }
    }
    cur
}

fn occlude<R: Rng>(img: &Image, mask: &[bool], fraction: f64, rng: &mut R) -> Image {
    let n = img.size;
    let lesion: Vec<(usize, usize)> = (0..n * n)
        .filter(|&i| mask[i])
        .map(|i| (i / n, i % n))
        .collect();
    let mut out = img.clone();
    let grey = rng.random_range(0.25..0.75) as f32;
    if lesion.is_empty() {
        return out;
    }
    let cy = lesion.iter().map(|p| p.0 as f64).sum::<f64>() / lesion.len() as f64;
    let cx = lesion.iter().map(|p| p.1 as f64).sum::<f64>() / lesion.len() as f64;
    let spread = (lesion.len() as f64).sqrt() * 0.15;
    let cy = cy + rng.random_range(-spread..=spread);
    let cx = cx + rng.random_range(-spread..=spread);
    let target = (fraction * lesion.len() as f64).ceil() as usize;
    let mut half = 0.5;
    loop {
        let covered = lesion
            .iter()
            .filter(|p| (p.0 as f64 - cy).abs() <= half && (p.1 as f64 - cx).abs() <= half)
            .count();
        if covered >= target {
            break;
        }
        half += 0.5;
    }
    for y in 0..n {
        for x in 0..n {
            if (y as f64 - cy).abs() <= half && (x as f64 - cx).abs() <= half {
                out.set(y, x, [grey; 3]);
            }
        }
    }
    out
}

fn saturate<R: Rng>(img: &Image, gain: f64, rng: &mut R) -> Image {
    let bias: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let mut out = img.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let c = i % 3;
        *v = (((*v as f64) - 0.5) * gain + 0.5 + bias[c]).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Produces an "unknown" variant of both views.
pub fn corrupt_unknown(
    lesion: &RenderedLesion,
    kind: CorruptKind,
    seed: u64,
    config: &CorruptionConfig,
) -> ImagePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = &lesion.pair;
    match kind {
        CorruptKind::Blur => {
            let r = (config.blur_radius * pair.clinical.size as f64).round() as usize;
            ImagePair {
                clinical: box_blur(&pair.clinical, r, 3),
                dermoscopic: box_blur(&pair.dermoscopic, r, 3),
            }
        }
        CorruptKind::Occlusion => ImagePair {
            clinical: occlude(&pair.clinical, &lesion.clinical_mask, config.occlusion_fraction, &mut rng),
            dermoscopic: occlude(
                &pair.dermoscopic,
                &lesion.dermoscopic_mask,
                config.occlusion_fraction,
                &mut rng,
            ),
        },
        CorruptKind::Saturation => ImagePair {
            clinical: saturate(&pair.clinical, config.saturation_gain, &mut rng),
            dermoscopic: saturate(&pair.dermoscopic, config.saturation_gain, &mut rng),
        },
    }
}

#[derive(Clone, Debug)]
pub struct GenSummary {
    pub taxonomy: Taxonomy,
    pub partition: SubsetPartition,
    pub records: Vec<LesionRecord>,
    pub warnings: Vec<String>,
    pub manifest_path: PathBuf,
    pub taxonomy_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TAXONOMY_FILE: &str = "taxonomy.tsv";

/// Writes images, `manifest.tsv` and `taxonomy.tsv` under `out_dir`.
/// Image paths in the manifest are relative to `out_dir`.
pub fn generate_dataset(spec: &GenSpec, out_dir: &Path) -> Result<GenSummary> {
    spec.validate()?;
    let taxonomy = spec.taxonomy()?;
    let partition = spec.partition()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut records = Vec::new();
    let mut index: u64 = 0;
    let emit = |pair: &ImagePair, label: RecordLabel, patient: String, index: u64| -> Result<LesionRecord> {
        let lesion_id = format!("L{index:06}");
        let c = PathBuf::from(format!("images/{lesion_id}_c.png"));
        let d = PathBuf::from(format!("images/{lesion_id}_d.png"));
        pair.clinical.save_png(&out_dir.join(&c))?;
        pair.dermoscopic.save_png(&out_dir.join(&d))?;
        Ok(LesionRecord {
            lesion_id,
            patient_id: patient,
            clinical_ref: c,
            dermoscopic_ref: d,
            label,
            split: Split::Train,
        })
    };
    for cat in &spec.categories {
        let l3 = taxonomy.level3_index(&cat.name).expect("category in taxonomy");
        let path: LabelPath = taxonomy.path_of(l3);
        let parents = cat.blend.as_ref().map(|(a, b)| {
            let find = |n: &str| spec.categories.iter().find(|c| c.name == n).expect("validated").params;
            (find(a), find(b))
        });
        for _ in 0..cat.count {
            let seed = derive_seed(spec.seed, "lesion", index);
            let pair = match &parents {
                Some((a, b)) => render_blend_lesion(&cat.params, a, b, spec.image_size, seed).pair,
                None => render_lesion_pair(&cat.params, spec.image_size, seed),
            };
            let patient = derive_seed(spec.seed, "patient", index) % spec.patients;
            records.push(emit(&pair, RecordLabel::Known(path), format!("P{patient:05}"), index)?);
            index += 1;
        }
    }
    let id_cats: Vec<&CategorySpec> = spec
        .categories
        .iter()
        .filter(|c| taxonomy.id_flags[taxonomy.level3_index(&c.name).expect("known")])
        .collect();
    for kind in CorruptKind::ALL {
        for _ in 0..spec.unknown_per_kind {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "unknown", index));
            let base = id_cats[rng.random_range(0..id_cats.len())];
            let lesion = render_lesion(&base.params, spec.image_size, rng.random());
            let pair = corrupt_unknown(&lesion, kind, rng.random(), &spec.corruption);
            records.push(emit(&pair, RecordLabel::Unknown, format!("U{index:06}"), index)?);
            index += 1;
        }
    }
    let warnings = split_train_test(
        &mut records,
        &taxonomy,
        SplitConfig {
            test_fraction: spec.test_fraction,
            val_fraction: spec.val_fraction,
            seed: derive_seed(spec.seed, "split", 0),
            allow_patient_overlap: false,
        },
    )?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let taxonomy_path = out_dir.join(TAXONOMY_FILE);
    std::fs::write(&manifest_path, write_manifest(&records, &taxonomy))?;
    std::fs::write(&taxonomy_path, taxonomy.to_document())?;
    Ok(GenSummary {
        taxonomy,
        partition,
        records,
        warnings,
        manifest_path,
        taxonomy_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CategoryParams {
        CategoryParams {
            hue: 0.05,
            eccentricity: 0.5,
            border: 0.0,
            coarse: 1.5,
            fine: 3.0,
        }
    }

    #[test]
    fn mini_spec_shape() {
        let spec = GenSpec::mini();
        let p = spec.partition().unwrap();
        assert_eq!(p.sizes(), (2, 6, 4, 3));
        let counts: Vec<u64> = spec.categories.iter().map(|c| c.count).collect();
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(max / min >= 20.0);
        assert_eq!(spec.unknown_per_kind * 3, 90);
        assert!(!spec.ambiguous.is_empty());
    }

    #[test]
    fn zero_border_gives_ellipse() {
        for seed in 0..5 {
            let r = render_lesion(&params(), 64, seed);
            for (mask, g) in [
                (&r.clinical_mask, r.clinical_geometry),
                (&r.dermoscopic_mask, r.dermoscopic_geometry),
            ] {
                let n = 64;
                for y in 0..n {
                    for x in 0..n {
                        if !mask[y * n + x] {
                            continue;
                        }
                        let edge = [(0i32, 1i32), (0, -1), (1, 0), (-1, 0)].iter().any(|(a, b)| {
                            let (yy, xx) = (y as i32 + a, x as i32 + b);
                            yy < 0 || xx < 0 || yy >= n as i32 || xx >= n as i32 || !mask[yy as usize * n + xx as usize]
                        });
                        if !edge || y == 0 || x == 0 || y == n - 1 || x == n - 1 {
                            continue;
                        }
                        let dx = x as f64 + 0.5 - g.center_x;
                        let dy = y as f64 + 0.5 - g.center_y;
                        let dev = (dx.hypot(dy) - g.ellipse_radius(dy.atan2(dx))).abs();
                        assert!(dev < 1.0, "radial deviation {dev}");
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let a = render_lesion_pair(&params(), 32, 9);
        assert_eq!(a, render_lesion_pair(&params(), 32, 9));
        assert_ne!(a, render_lesion_pair(&params(), 32, 10));
        assert!(a.is_valid());
    }

    #[test]
    fn zero_radius_blur_is_identity() {
        let r = render_lesion(&params(), 32, 1);
        let cfg = CorruptionConfig {
            blur_radius: 0.0,
            ..Default::default()
        };
        assert_eq!(corrupt_unknown(&r, CorruptKind::Blur, 3, &cfg), r.pair);
    }

    #[test]
    fn occlusion_covers_forty_percent_of_lesion() {
        let cfg = CorruptionConfig::default();
        for seed in 0..10 {
            let r = render_lesion(&params(), 64, seed);
            let out = corrupt_unknown(&r, CorruptKind::Occlusion, seed + 100, &cfg);
            for (before, after, mask) in [
                (&r.pair.clinical, &out.clinical, &r.clinical_mask),
                (&r.pair.dermoscopic, &out.dermoscopic, &r.dermoscopic_mask),
            ] {
                let lesion = mask.iter().filter(|m| **m).count();
                let changed = (0..64 * 64)
                    .filter(|&i| mask[i] && before.get(i / 64, i % 64) != after.get(i / 64, i % 64))
                    .count();
                assert!(changed as f64 >= 0.4 * lesion as f64, "{changed}/{lesion}");
            }
        }
    }

    #[test]
    fn saturation_clips_channels() {
        let r = render_lesion(&params(), 32, 4);
        let out = corrupt_unknown(&r, CorruptKind::Saturation, 5, &CorruptionConfig::default());
        assert!(out.is_valid());
        let clipped = out.dermoscopic.data.iter().filter(|v| **v == 0.0 || **v == 1.0).count();
        assert!(clipped > out.dermoscopic.data.len() / 10);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("smudge".parse::<CorruptKind>(), Err(GenError::UnknownKind(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!("0.1 0.2 0.9 1 1".parse::<CategoryParams>().is_err());
        assert!("0.1 0.2".parse::<CategoryParams>().is_err());
    }
}

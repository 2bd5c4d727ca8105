//! Procedural brain phantoms with known anatomical and tumour labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::par;

use super::slice::Case;
use super::volume::{Modality, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// In-plane extent (X = Y).
    pub size: usize,
    /// Number of axial slices (Z).
    pub slices: usize,
    pub n_cases: usize,
    pub tumour_probability: f64,
    /// Range of the base tumour radius in normalized grid units.
    pub tumour_radius: (f64, f64),
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

/// Relative amplitude of the tumour lobes.
const LOBE_AMPLITUDE: f64 = 0.25;

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 64,
            slices: 32,
            n_cases: 50,
            tumour_probability: 0.8,
            tumour_radius: (0.2, 0.35),
            noise: 0.02,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!("phantom.size {} is below 32", self.size)));
        }
        if self.slices == 0 || self.n_cases == 0 {
            return Err(Error::Config("phantom.slices and phantom.n_cases must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tumour_probability) {
            return Err(Error::Config("phantom.tumour_probability must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.tumour_radius;
        if !(lo > 0.0 && lo <= hi && hi <= 0.4) {
            return Err(Error::Config(format!(
                "phantom.tumour_radius ({lo}, {hi}) must satisfy 0 < min <= max <= 0.4"
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("phantom.noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Bounds on the tumour's share of the grid volume for a tumoural case.
    pub fn tumour_fraction_bounds(&self) -> (f64, f64) {
        let ball = |r: f64| 4.0 / 3.0 * PI * r.powi(3) / 8.0;
        (
            ball(self.tumour_radius.0 * (1.0 - LOBE_AMPLITUDE)),
            ball(self.tumour_radius.1 * (1.0 + LOBE_AMPLITUDE)),
        )
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("phantom.size", self.size);
        kv.set("phantom.slices", self.slices);
        kv.set("phantom.n_cases", self.n_cases);
        kv.set("phantom.tumour_probability", self.tumour_probability);
        kv.set(
            "phantom.tumour_radius",
            format!("{},{}", self.tumour_radius.0, self.tumour_radius.1),
        );
        kv.set("phantom.noise", self.noise);
        kv.set("phantom.seed", self.seed);
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let tumour_radius = match kv.get_list::<f64>("phantom.tumour_radius")? {
            None => d.tumour_radius,
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(_) => return Err(Error::Config("phantom.tumour_radius expects min,max".into())),
        };
        let cfg = PhantomConfig {
            size: kv.get_or("phantom.size", d.size)?,
            slices: kv.get_or("phantom.slices", d.slices)?,
            n_cases: kv.get_or("phantom.n_cases", d.n_cases)?,
            tumour_probability: kv.get_or("phantom.tumour_probability", d.tumour_probability)?,
            tumour_radius,
            noise: kv.get_or("phantom.noise", d.noise)?,
            seed: kv.get_or("phantom.seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy)]
enum Tissue {
    Background,
    Scalp,
    Cerebrum,
    Cerebellum,
    Ventricle,
    Necrosis,
    Edema,
    Enhancing,
}

impl Tissue {
    /// Base intensity per modality (T1, T1Gd, T2, FLAIR).
    fn intensity(self) -> [f64; 4] {
        match self {
            Tissue::Background => [0.0, 0.0, 0.0, 0.0],
            Tissue::Scalp => [0.85, 0.8, 0.35, 0.45],
            Tissue::Cerebrum => [0.6, 0.6, 0.45, 0.5],
            Tissue::Cerebellum => [0.5, 0.52, 0.55, 0.42],
            Tissue::Ventricle => [0.18, 0.2, 0.95, 0.12],
            Tissue::Necrosis => [0.28, 0.3, 0.75, 0.55],
            Tissue::Edema => [0.42, 0.44, 0.88, 0.92],
            Tissue::Enhancing => [0.5, 0.98, 0.62, 0.72],
        }
    }
}

/// Randomized head pose.
struct Pose {
    angle: f64,
    scale: [f64; 3],
    shift: [f64; 3],
}

impl Pose {
    /// Maps normalized grid coordinates into the canonical head frame.
    fn to_head(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let x = p[0] - self.shift[0];
        let y = p[1] - self.shift[1];
        [
            (c * x + s * y) / self.scale[0],
            (-s * x + c * y) / self.scale[1],
            (p[2] - self.shift[2]) / self.scale[2],
        ]
    }
}

fn ellipsoid(q: [f64; 3], centre: [f64; 3], radii: [f64; 3]) -> f64 {
    (0..3).map(|i| ((q[i] - centre[i]) / radii[i]).powi(2)).sum()
}

/// Anatomical label (0 outside the brain) and tissue at head coordinates.
fn anatomy(q: [f64; 3]) -> (u8, Tissue) {
    if ellipsoid(q, [0.0; 3], [0.8, 0.92, 0.95]) > 1.0 {
        return (0, Tissue::Background);
    }
    if ellipsoid(q, [0.0; 3], [0.7, 0.82, 0.85]) > 1.0 {
        return (0, Tissue::Scalp);
    }
    let left = q[0] < 0.0;
    let side = |l: u8| if left { l } else { l + 1 };
    for cx in [-0.17, 0.17] {
        if ellipsoid(q, [cx, -0.05, 0.15], [0.1, 0.32, 0.3]) <= 1.0 {
            return (side(5), Tissue::Ventricle);
        }
    }
    if q[1] > 0.3 && q[2] < -0.1 {
        return (side(3), Tissue::Cerebellum);
    }
    (side(1), Tissue::Cerebrum)
}

struct Tumour {
    centre: [f64; 3],
    radius: f64,
    phases: [f64; 3],
}

impl Tumour {
    /// Normalized distance from the centre relative to the lobed boundary.
    fn level(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1], p[2] - self.centre[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if r == 0.0 {
            return 0.0;
        }
        let theta = d[1].atan2(d[0]);
        let elev = d[2] / r;
        let lobes = 0.6 * (3.0 * theta + self.phases[0]).cos()
            + 0.4 * (2.0 * PI * elev + self.phases[1]).sin() * (2.0 * theta + self.phases[2]).cos();
        r / (self.radius * (1.0 + LOBE_AMPLITUDE * lobes))
    }

    fn tissue(&self, p: [f64; 3]) -> Option<(u8, Tissue)> {
        match self.level(p) {
            l if l <= 0.3 => Some((1, Tissue::Necrosis)),
            l if l <= 0.55 => Some((4, Tissue::Enhancing)),
            l if l <= 1.0 => Some((2, Tissue::Edema)),
            _ => None,
        }
    }
}

/// Smooth low-frequency texture shared by all modalities.
struct Texture {
    waves: Vec<([f64; 3], f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                let k = [
                    rng.random_range(1.0..4.0),
                    rng.random_range(1.0..4.0),
                    rng.random_range(0.5..2.0),
                ];
                (k, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, q: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(k, ph)| (k[0] * q[0] + k[1] * q[1] + k[2] * q[2] + ph).sin())
            .sum::<f64>()
            / self.waves.len() as f64
    }
}

const GAMMA: [f64; 4] = [1.0, 0.9, 1.1, 1.2];

fn generate_case(cfg: &PhantomConfig, index: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, ny, nz) = (cfg.size, cfg.size, cfg.slices);
    let pose = Pose {
        angle: rng.random_range(-0.15..0.15),
        scale: [
            rng.random_range(0.85..1.0),
            rng.random_range(0.85..1.0),
            rng.random_range(0.9..1.05),
        ],
        shift: [
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ],
    };
    let texture = Texture::new(&mut rng);
    let contrast: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.9..1.1));

    let tumour = if rng.random::<f64>() < cfg.tumour_probability {
        let radius = rng.random_range(cfg.tumour_radius.0..=cfg.tumour_radius.1);
        let mut centre = [0.0; 3];
        for _ in 0..100 {
            centre = std::array::from_fn(|_| rng.random_range(-0.45..0.45));
            if matches!(anatomy(pose.to_head(centre)).1, Tissue::Cerebrum | Tissue::Cerebellum) {
                break;
            }
        }
        let phases = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        Some(Tumour {
            centre,
            radius,
            phases,
        })
    } else {
        None
    };

    let n = nx * ny * nz;
    let mut channels = [vec![0f32; n], vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    let mut seg = vec![0f32; n];
    let mut anat = vec![0f32; n];
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let p = [coord(x, nx), coord(y, ny), coord(z, nz)];
                let q = pose.to_head(p);
                let (label, mut tissue) = anatomy(q);
                anat[i] = label as f32;
                if label != 0 {
                    if let Some((s, t)) = tumour.as_ref().and_then(|t| t.tissue(p)) {
                        seg[i] = s as f32;
                        tissue = t;
                    }
                }
                if matches!(tissue, Tissue::Background) {
                    continue;
                }
                let base = tissue.intensity();
                let tex = 1.0 + 0.08 * texture.at(q);
                for m in 0..4 {
                    let v = (base[m] * contrast[m] * tex).clamp(0.0, 1.0).powf(GAMMA[m]);
                    channels[m][i] = (v + noise.sample(&mut rng)) as f32;
                }
            }
        }
    }

    let extents = [nx, ny, nz];
    let vol = |data, m| Volume::new(extents, data, m).expect("generated volume is valid");
    let [t1, t1gd, t2, flair] = channels;
    Case {
        id: format!("phantom_{index:04}"),
        modalities: [
            vol(t1, Modality::T1),
            vol(t1gd, Modality::T1Gd),
            vol(t2, Modality::T2),
            vol(flair, Modality::Flair),
        ],
        seg: Some(vol(seg, Modality::Seg)),
        anat: Some(vol(anat, Modality::Anat)),
    }
}

/// Generates `n_cases` independent phantoms; the result depends only on
/// the configuration.
pub fn generate_phantom(config: &PhantomConfig) -> Result<Vec<Case>> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<u64> = (0..config.n_cases).map(|_| master.random()).collect();
    Ok(par::map_range(config.n_cases, |i| generate_case(config, i, seeds[i])))
}

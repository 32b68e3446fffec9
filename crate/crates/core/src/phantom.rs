//! Seeded synthetic phantoms: activity, co-registered anatomy and lesion
//! masks.
//!
//! Each phantom is a stack of 2-6 rotated ellipses (the first acts as the
//! body outline) with uniform uptake per ellipse, plus up to 4 circular hot
//! lesions placed by rejection sampling inside the organ union. The anatomy
//! image is piecewise constant with region boundaries that coincide exactly
//! with the activity's organ boundaries; lesions are functional only and do
//! not appear in the anatomy unless `lesion_in_anatomy` is set. Everything
//! derives from the seed through the splitmix generator, so a spec maps to
//! bit-identical output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::grid::{GridImage, LesionMask, Units};
use crate::rng::SplitMix64;
use num_traits::Float;

/// Parameters of one synthetic phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Side length of the square grid, pixels.
    pub grid_size: usize,
    pub spacing_mm: f64,
    /// Number of ellipse organs, in [2, 6].
    pub n_organs: usize,
    /// Number of circular lesions, in [0, 4].
    pub n_lesions: usize,
    /// Lesion radius range, mm.
    pub lesion_radius_mm: (f64, f64),
    /// Lesion-to-organ uptake ratio range, > 1.
    pub lesion_contrast: (f64, f64),
    /// Per-organ uptake range, arbitrary activity units.
    pub organ_activity: (f64, f64),
    /// Make lesions visible in the anatomy image as well.
    pub lesion_in_anatomy: bool,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            grid_size: 128,
            spacing_mm: 2.0,
            n_organs: 4,
            n_lesions: 2,
            lesion_radius_mm: (4.0, 9.0),
            lesion_contrast: (1.6, 3.0),
            organ_activity: (0.25, 1.0),
            lesion_in_anatomy: false,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), Error> {
        if self.grid_size == 0 {
            return Err(Error::Config(String::from("grid_size must be positive")));
        }
        if !(self.spacing_mm > 0.0) {
            return Err(Error::Config(String::from("spacing_mm must be positive")));
        }
        if !(2..=6).contains(&self.n_organs) {
            return Err(Error::Config(format!("n_organs must be in [2,6], got {}", self.n_organs)));
        }
        if self.n_lesions > 4 {
            return Err(Error::Config(format!("n_lesions must be in [0,4], got {}", self.n_lesions)));
        }
        let ranges = [
            ("lesion_radius_mm", self.lesion_radius_mm, 0.0),
            ("lesion_contrast", self.lesion_contrast, 1.0),
            ("organ_activity", self.organ_activity, 0.0),
        ];
        for (name, (lo, hi), floor) in ranges {
            if !(lo > floor) || hi < lo {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        Ok(())
    }
}

/// Rotated ellipse in physical (mm) coordinates centred on the grid centre.
#[derive(Debug, Clone)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_phi: f64,
    sin_phi: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_phi + dy * self.sin_phi;
        let v = -dx * self.sin_phi + dy * self.cos_phi;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b) <= 1.0
    }
}

/// One generated phantom.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub activity: GridImage,
    pub anatomy: GridImage,
    pub lesions: Vec<LesionMask>,
}

const LESION_PLACEMENT_ATTEMPTS: usize = 100;

/// Generates the (activity, anatomy, lesion masks) triple. Pure in `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom, Error> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let n = spec.grid_size;
    let half_fov = n as f64 * spec.spacing_mm / 2.0;
    let centre = (n as f64 - 1.0) / 2.0;

    // Organ layout. The first ellipse is the body outline; the rest sit
    // inside its bounding region and may overlap each other.
    let mut organs = Vec::with_capacity(spec.n_organs);
    let mut uptakes = Vec::with_capacity(spec.n_organs);
    let mut tissues = Vec::with_capacity(spec.n_organs);
    for k in 0..spec.n_organs {
        let e = if k == 0 {
            Ellipse {
                cx: rng.uniform(-0.05, 0.05) * half_fov,
                cy: rng.uniform(-0.05, 0.05) * half_fov,
                a: rng.uniform(0.62, 0.82) * half_fov,
                b: rng.uniform(0.55, 0.78) * half_fov,
                cos_phi: 1.0,
                sin_phi: 0.0,
            }
        } else {
            let phi = rng.uniform(0.0, core::f64::consts::PI);
            Ellipse {
                cx: rng.uniform(-0.42, 0.42) * half_fov,
                cy: rng.uniform(-0.42, 0.42) * half_fov,
                a: rng.uniform(0.10, 0.30) * half_fov,
                b: rng.uniform(0.08, 0.24) * half_fov,
                cos_phi: phi.cos(),
                sin_phi: phi.sin(),
            }
        };
        organs.push(e);
        uptakes.push(rng.uniform(spec.organ_activity.0, spec.organ_activity.1));
        tissues.push(rng.uniform(0.15, 1.0));
    }

    // Base images: uptakes and tissue intensities sum over covering organs,
    // so both share exactly the same region boundaries.
    let mut activity = vec![0.0f64; n * n];
    let mut anatomy = vec![0.0f64; n * n];
    let mut organ_union = vec![false; n * n];
    for row in 0..n {
        let y = (row as f64 - centre) * spec.spacing_mm;
        for col in 0..n {
            let x = (col as f64 - centre) * spec.spacing_mm;
            let idx = row * n + col;
            for (k, organ) in organs.iter().enumerate() {
                if organ.contains(x, y) {
                    activity[idx] += uptakes[k];
                    anatomy[idx] += tissues[k];
                    organ_union[idx] = true;
                }
            }
        }
    }

    // Lesions: circular hot spots whose full pixel support must lie inside
    // the organ union; uptake is multiplicative contrast on the local base.
    let mut lesions = Vec::with_capacity(spec.n_lesions);
    for li in 0..spec.n_lesions {
        let mut placed = false;
        for _attempt in 0..LESION_PLACEMENT_ATTEMPTS {
            let cx = rng.uniform(-0.9, 0.9) * half_fov;
            let cy = rng.uniform(-0.9, 0.9) * half_fov;
            let r = rng.uniform(spec.lesion_radius_mm.0, spec.lesion_radius_mm.1);
            let contrast = rng.uniform(spec.lesion_contrast.0, spec.lesion_contrast.1);

            let mut support = Vec::new();
            let mut inside_union = true;
            let r_px = r / spec.spacing_mm;
            let row_lo = ((centre + cy / spec.spacing_mm - r_px).floor().max(0.0)) as usize;
            let row_hi = ((centre + cy / spec.spacing_mm + r_px).ceil()).min(n as f64 - 1.0) as usize;
            for row in row_lo..=row_hi {
                let y = (row as f64 - centre) * spec.spacing_mm;
                for col in 0..n {
                    let x = (col as f64 - centre) * spec.spacing_mm;
                    if (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r {
                        let idx = row * n + col;
                        if !organ_union[idx] {
                            inside_union = false;
                            break;
                        }
                        support.push(idx);
                    }
                }
                if !inside_union {
                    break;
                }
            }
            if !inside_union || support.is_empty() {
                continue;
            }
            let mut mask = vec![false; n * n];
            for &idx in &support {
                activity[idx] *= contrast;
                if spec.lesion_in_anatomy {
                    anatomy[idx] *= contrast;
                }
                mask[idx] = true;
            }
            lesions.push(LesionMask::new(n, n, mask, format!("lesion_{li}"))?);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place lesion {li} inside an organ after {LESION_PLACEMENT_ATTEMPTS} attempts (seed {})",
                spec.seed
            )));
        }
    }

    Ok(Phantom {
        activity: GridImage::new(n, n, spec.spacing_mm, Units::Activity, activity)?,
        anatomy: GridImage::new(n, n, spec.spacing_mm, Units::Anatomy, anatomy)?,
        lesions,
    })
}

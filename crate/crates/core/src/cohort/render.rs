//! Procedural scan renderer.
//!
//! OCT: eight column groups, each holding four stacked horizontal bands. Band
//! `k` of group `g` encodes OCT biomarker `4g + k` through its thickness,
//! which is affine in the biomarker's z-score with an anti-aliased lower edge.
//!
//! CFP: an optic disc with a brighter cup whose radius is the vertical
//! cup-to-disc ratio times the disc radius, plus three arteries and three
//! veins. Vessel width encodes the arteriovenous ratio, reach encodes the
//! fractal dimension and waviness encodes tortuosity.
//!
//! Both modalities add seeded Gaussian noise (sigma 0.05) and clamp to [0, 1].

use rand_distr::{Distribution, Normal};

use super::{BiomarkerVector, Modality, SyntheticScan, NUM_OCT};
use crate::error::Result;
use crate::rng::stream_rng;

pub const SCAN_SIDE: usize = 64;

const NOISE_SD: f64 = 0.05;

const GROUP_WIDTH: usize = 8;
const BANDS_PER_GROUP: usize = 4;
const SLOT_TOP: usize = 4;
const SLOT_HEIGHT: usize = 14;
const BAND_OFFSET: f64 = 2.0;
const BAND_BASE: f64 = 5.0;
const BAND_PER_SD: f64 = 1.5;
const BAND_MAX: f64 = 11.5;
const OCT_BACKGROUND: f64 = 0.1;
const BAND_INTENSITY: [f64; BANDS_PER_GROUP] = [0.85, 0.55, 0.75, 0.45];

const DISC_X: f64 = 18.0;
const DISC_Y: f64 = 32.0;
const DISC_RADIUS: f64 = 8.0;
const FUNDUS_LEVEL: f64 = 0.35;
const RIM_LEVEL: f64 = 0.7;
const CUP_LEVEL: f64 = 0.95;
const VEIN_HALF_WIDTH: f64 = 1.3;
const ARTERY_ANGLES: [f64; 3] = [-1.05, 0.05, 1.0];
const VEIN_ANGLES: [f64; 3] = [-0.75, 0.4, 1.35];

fn band_thickness(z: f64) -> f64 {
    (BAND_BASE + BAND_PER_SD * z).clamp(0.5, BAND_MAX)
}

fn slot_of(marker: usize) -> (usize, usize) {
    (marker / BANDS_PER_GROUP, marker % BANDS_PER_GROUP)
}

fn render_oct_clean(b: &BiomarkerVector) -> Vec<f64> {
    let z = b.z_scores();
    let mut img = vec![OCT_BACKGROUND; SCAN_SIDE * SCAN_SIDE];
    for (marker, &zm) in z.iter().enumerate().take(NUM_OCT) {
        let (group, band) = slot_of(marker);
        let start = (SLOT_TOP + band * SLOT_HEIGHT) as f64 + BAND_OFFSET;
        let end = start + band_thickness(zm);
        let level = BAND_INTENSITY[band];
        for row in start as usize..(end.ceil() as usize).min(SCAN_SIDE) {
            let cover = (end - row as f64).clamp(0.0, 1.0);
            let value = OCT_BACKGROUND + cover * (level - OCT_BACKGROUND);
            for col in group * GROUP_WIDTH..(group + 1) * GROUP_WIDTH {
                img[row * SCAN_SIDE + col] = value;
            }
        }
    }
    img
}

/// Estimated OCT z-scores recovered from a rendered scan by integrating each
/// band's excess intensity over its slot.
pub fn invert_oct(scan: &SyntheticScan) -> Vec<f64> {
    let px = &scan.pixels;
    (0..NUM_OCT)
        .map(|marker| {
            let (group, band) = slot_of(marker);
            let top = SLOT_TOP + band * SLOT_HEIGHT;
            let level = BAND_INTENSITY[band];
            let mut excess = 0.0;
            for row in top..top + SLOT_HEIGHT {
                for col in group * GROUP_WIDTH..(group + 1) * GROUP_WIDTH {
                    excess += f64::from(px[row * SCAN_SIDE + col]) - OCT_BACKGROUND;
                }
            }
            let thickness = excess / (GROUP_WIDTH as f64 * (level - OCT_BACKGROUND));
            (thickness - BAND_BASE) / BAND_PER_SD
        })
        .collect()
}

struct Vessel {
    angle: f64,
    reach: f64,
    amplitude: f64,
    half_width: f64,
    darkness: f64,
}

fn vessel_mask(vessels: &[Vessel]) -> Vec<f64> {
    let mut mask = vec![0.0f64; SCAN_SIDE * SCAN_SIDE];
    for v in vessels {
        let (dir_x, dir_y) = (v.angle.cos(), v.angle.sin());
        let (perp_x, perp_y) = (-dir_y, dir_x);
        let mut r = DISC_RADIUS + 1.5;
        while r <= v.reach {
            let wave = v.amplitude * (std::f64::consts::TAU * (r - DISC_RADIUS) / 12.0).sin();
            let cx = DISC_X + r * dir_x + wave * perp_x;
            let cy = DISC_Y + r * dir_y + wave * perp_y;
            let reach = v.half_width + 1.0;
            let (x0, x1) = ((cx - reach).floor().max(0.0) as usize, (cx + reach).ceil().min(SCAN_SIDE as f64 - 1.0) as usize);
            let (y0, y1) = ((cy - reach).floor().max(0.0) as usize, (cy + reach).ceil().min(SCAN_SIDE as f64 - 1.0) as usize);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                    let cover = (v.half_width + 0.5 - d).clamp(0.0, 1.0) * v.darkness;
                    let m = &mut mask[y * SCAN_SIDE + x];
                    *m = m.max(cover);
                }
            }
            r += 0.5;
        }
    }
    mask
}

fn render_cfp_clean(b: &BiomarkerVector) -> Vec<f64> {
    let cdr = b.get("vertical_cup_disc_ratio");
    let av = b.get("av_ratio");
    let reach = |fd: f64| (20.0 + (fd - 1.30) * 150.0).clamp(DISC_RADIUS + 3.0, 60.0);
    let amplitude = |tort: f64| ((tort - 1.0) * 60.0).clamp(0.0, 14.0);
    let mut vessels = Vec::with_capacity(6);
    for &angle in &ARTERY_ANGLES {
        vessels.push(Vessel {
            angle,
            reach: reach(b.get("artery_fractal_dim")),
            amplitude: amplitude(b.get("artery_tortuosity")),
            half_width: (av * VEIN_HALF_WIDTH).clamp(0.2, 3.0),
            darkness: 0.45,
        });
    }
    for &angle in &VEIN_ANGLES {
        vessels.push(Vessel {
            angle,
            reach: reach(b.get("vein_fractal_dim")),
            amplitude: amplitude(b.get("vein_tortuosity")),
            half_width: VEIN_HALF_WIDTH,
            darkness: 0.65,
        });
    }
    let mask = vessel_mask(&vessels);
    let cup_radius = cdr * DISC_RADIUS;
    let centre = SCAN_SIDE as f64 / 2.0;
    let mut img = vec![0.0; SCAN_SIDE * SCAN_SIDE];
    for y in 0..SCAN_SIDE {
        for x in 0..SCAN_SIDE {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let vignette = 1.0 - 0.25 * (((px - centre).powi(2) + (py - centre).powi(2)).sqrt() / centre).powi(2);
            let d = ((px - DISC_X).powi(2) + (py - DISC_Y).powi(2)).sqrt();
            let disc = (DISC_RADIUS + 0.5 - d).clamp(0.0, 1.0);
            let cup = (cup_radius + 0.5 - d).clamp(0.0, 1.0);
            let base = FUNDUS_LEVEL * vignette
                + disc * (RIM_LEVEL - FUNDUS_LEVEL * vignette)
                + cup * (CUP_LEVEL - RIM_LEVEL);
            img[y * SCAN_SIDE + x] = base * (1.0 - mask[y * SCAN_SIDE + x]);
        }
    }
    img
}

/// Mean intensity inside the optic disc.
pub fn disc_region_mean(scan: &SyntheticScan) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..scan.side {
        for x in 0..scan.side {
            let d = ((x as f64 + 0.5 - DISC_X).powi(2) + (y as f64 + 0.5 - DISC_Y).powi(2)).sqrt();
            if d <= DISC_RADIUS {
                sum += f64::from(scan.pixels[y * scan.side + x]);
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Deterministic rendering of `b` in the requested modality.
pub fn render_scan(b: &BiomarkerVector, modality: Modality, seed: u64) -> Result<SyntheticScan> {
    b.validate()?;
    let clean = match modality {
        Modality::Oct => render_oct_clean(b),
        Modality::Cfp => render_cfp_clean(b),
    };
    let stream = match modality {
        Modality::Oct => "oct-noise",
        Modality::Cfp => "cfp-noise",
    };
    let mut rng = stream_rng(seed, stream, 0);
    let noise = Normal::new(0.0, NOISE_SD).expect("positive noise sd");
    let pixels = clean
        .into_iter()
        .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(SyntheticScan {
        modality,
        side: SCAN_SIDE,
        pixels,
        source_biomarkers: b.clone(),
    })
}

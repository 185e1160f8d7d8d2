//! Rasterization of one synthetic thin-smear field of view: tinted
//! background, elliptical RBC-like cells with pale centers, dark chromatic
//! inclusions on infected cells, unannotated stain artifacts, then optical
//! blur and sensor noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::core::{Annotation, BoundingBox, CellClass, Pixels};
use crate::rng::rng_for;
use crate::synthgen::SiteProfile;

/// Maximum IoU two generated cells may share; keeps ground truth unambiguous.
const MAX_CELL_IOU: f64 = 0.3;

struct Canvas {
    size: usize,
    data: Vec<f32>, // RGB interleaved
}

impl Canvas {
    fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Self { size, data }
    }

    #[inline]
    fn blend(&mut self, x: usize, y: usize, rgb: [f32; 3], alpha: f32) {
        let base = (y * self.size + x) * 3;
        for c in 0..3 {
            let old = self.data[base + c];
            self.data[base + c] = old + (rgb[c] - old) * alpha;
        }
    }

    fn quantize(self) -> Pixels {
        let data = self
            .data
            .into_iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        Pixels {
            width: self.size as u32,
            height: self.size as u32,
            data,
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let (r, g, b) = (r / 255.0, g / 255.0, b / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn rotate_hue(rgb: [f32; 3], degrees: f32) -> [f32; 3] {
    if degrees == 0.0 {
        return rgb;
    }
    let mut hsv = rgb_to_hsv(rgb);
    hsv[0] = (hsv[0] + degrees).rem_euclid(360.0);
    hsv_to_rgb(hsv)
}

fn scale(rgb: [f32; 3], f: f32) -> [f32; 3] {
    [rgb[0] * f, rgb[1] * f, rgb[2] * f]
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn smoothstep(lo: f32, hi: f32, x: f32) -> f32 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Placed cell before rasterization.
#[derive(Debug, Clone, Copy)]
struct Cell {
    cx: f64, // pixels
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
    bbox: BoundingBox,
    infected: bool,
    inc_dx: f64,
    inc_dy: f64,
    inc_r: f64,
}

fn ellipse_extents(rx: f64, ry: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let ex = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
    let ey = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
    (ex, ey)
}

/// Rasterize a soft-edged ellipse with a pale center.
fn draw_cell(canvas: &mut Canvas, cell: &Cell, rim: [f32; 3], center: [f32; 3]) {
    let size = canvas.size as f64;
    let (ex, ey) = ellipse_extents(cell.rx, cell.ry, cell.theta);
    let x0 = (cell.cx - ex).floor().max(0.0) as usize;
    let x1 = (cell.cx + ex).ceil().min(size - 1.0) as usize;
    let y0 = (cell.cy - ey).floor().max(0.0) as usize;
    let y1 = (cell.cy + ey).ceil().min(size - 1.0) as usize;
    let (sin_t, cos_t) = cell.theta.sin_cos();
    let soft = 1.4 / cell.rx.min(cell.ry); // ~1.4px soft edge in normalized units
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cell.cx;
            let dy = y as f64 + 0.5 - cell.cy;
            let u = (dx * cos_t + dy * sin_t) / cell.rx;
            let v = (-dx * sin_t + dy * cos_t) / cell.ry;
            let d = (u * u + v * v).sqrt() as f32;
            if d >= 1.0 {
                continue;
            }
            let cov = ((1.0 - d) / soft as f32).clamp(0.0, 1.0);
            let t = smoothstep(0.30, 0.92, d);
            let color = mix(center, rim, t);
            canvas.blend(x, y, color, cov);
        }
    }
}

/// Rasterize a small soft disc (parasite inclusion or stain artifact).
fn draw_disc(canvas: &mut Canvas, cx: f64, cy: f64, r: f64, color: [f32; 3], alpha: f32) {
    let size = canvas.size as f64;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let x1 = (cx + r).ceil().min(size - 1.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let y1 = (cy + r).ceil().min(size - 1.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let d = ((dx * dx + dy * dy).sqrt() / r) as f32;
            if d >= 1.0 {
                continue;
            }
            let cov = alpha * ((1.0 - d) * r as f32 / 1.1).clamp(0.0, 1.0);
            canvas.blend(x, y, color, cov);
        }
    }
}

fn gaussian_blur(canvas: &mut Canvas, sigma: f64) {
    if sigma < 0.05 {
        return;
    }
    let radius = (sigma * 2.5).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f32;
    for i in -radius..=radius {
        let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32;
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }
    let size = canvas.size as isize;
    let mut tmp = vec![0.0f32; canvas.data.len()];
    // horizontal
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, size - 1);
                    acc += w * canvas.data[((y * size + sx) * 3) as usize + c];
                }
                tmp[((y * size + x) * 3) as usize + c] = acc;
            }
        }
    }
    // vertical
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, size - 1);
                    acc += w * tmp[((sy * size + x) * 3) as usize + c];
                }
                canvas.data[((y * size + x) * 3) as usize + c] = acc;
            }
        }
    }
}

/// Render one image of a site. Deterministic given the profile and the
/// (patient, image) indices; the stain hue shift only transforms the palette
/// and consumes no randomness, so profiles differing solely in hue produce
/// identical layouts and annotations.
pub fn render_image(
    profile: &SiteProfile,
    patient_idx: usize,
    image_idx: usize,
    positive: bool,
    image_size: usize,
) -> (Pixels, Vec<Annotation>) {
    let mut rng = rng_for(
        profile.seed,
        &["render", &profile.site_id],
        &[patient_idx as u64, image_idx as u64],
    );
    let mut patient_rng = rng_for(profile.seed, &["patient", &profile.site_id], &[patient_idx as u64]);
    let patient_hue: f32 = patient_rng.random_range(-6.0..6.0);
    let patient_illum: f32 = patient_rng.random_range(0.92..1.08);

    let hue = profile.stain_hue_shift as f32 + patient_hue;
    let background = scale(
        rotate_hue(
            [
                profile.background_tint[0] as f32,
                profile.background_tint[1] as f32,
                profile.background_tint[2] as f32,
            ],
            patient_hue,
        ),
        patient_illum,
    );
    let rim = scale(rotate_hue([205.0, 102.0, 124.0], hue), patient_illum);
    let center = mix(rim, background, 0.58);
    let parasite = scale(rotate_hue([58.0, 28.0, 96.0], hue), patient_illum);
    let artifact_color = scale(rotate_hue([104.0, 70.0, 98.0], hue), patient_illum);

    // layout
    let size = image_size as f64;
    let n_cells = rng.random_range(profile.cell_density.0..=profile.cell_density.1);
    let mut cells: Vec<Cell> = Vec::with_capacity(n_cells);
    let mut attempts = 0usize;
    while cells.len() < n_cells && attempts < n_cells * 60 {
        attempts += 1;
        let rx = rng.random_range(9.0..14.0);
        let ry = rx * rng.random_range(0.8..1.1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (ex, ey) = ellipse_extents(rx, ry, theta);
        let margin = 2.0;
        let cx = rng.random_range(ex + margin..size - ex - margin);
        let cy = rng.random_range(ey + margin..size - ey - margin);
        let bbox = BoundingBox::new_unchecked(
            cx / size,
            cy / size,
            2.0 * ex / size,
            2.0 * ey / size,
        );
        if cells
            .iter()
            .any(|c| crate::core::iou(&c.bbox, &bbox) > MAX_CELL_IOU)
        {
            continue;
        }
        cells.push(Cell {
            cx,
            cy,
            rx,
            ry,
            theta,
            bbox,
            infected: false,
            inc_dx: 0.0,
            inc_dy: 0.0,
            inc_r: 0.0,
        });
    }

    // infected subset
    if positive && !cells.is_empty() {
        let k = rng
            .random_range(profile.parasite_per_positive.0..=profile.parasite_per_positive.1)
            .min(cells.len());
        let mut order: Vec<usize> = (0..cells.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for &idx in order.iter().take(k) {
            let cell = &mut cells[idx];
            let max_off = 0.45 * cell.rx.min(cell.ry);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(0.0..max_off);
            cell.infected = true;
            cell.inc_dx = angle.cos() * dist;
            cell.inc_dy = angle.sin() * dist;
            cell.inc_r = rng.random_range(4.2..6.0);
        }
    }

    let mut canvas = Canvas::filled(image_size, background);
    for cell in &cells {
        draw_cell(&mut canvas, cell, rim, center);
    }
    for cell in cells.iter().filter(|c| c.infected) {
        draw_disc(
            &mut canvas,
            cell.cx + cell.inc_dx,
            cell.cy + cell.inc_dy,
            cell.inc_r,
            parasite,
            0.95,
        );
    }

    // stain artifacts: parasite-like blobs with no annotation
    if profile.artifact_rate > 0.0 && rng.random_bool(profile.artifact_rate) {
        let n_art = rng.random_range(1..=3usize);
        for _ in 0..n_art {
            let r = rng.random_range(2.0..6.0);
            let cx = rng.random_range(r..size - r);
            let cy = rng.random_range(r..size - r);
            draw_disc(&mut canvas, cx, cy, r, artifact_color, 0.85);
        }
    }

    gaussian_blur(&mut canvas, profile.blur_sigma);

    if profile.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, profile.noise_std as f32).expect("valid noise std");
        for v in &mut canvas.data {
            *v += normal.sample(&mut rng);
        }
    }

    let mut annotations = Vec::new();
    for cell in &cells {
        annotations.push(Annotation {
            bbox: cell.bbox,
            cls: CellClass::Rbc,
        });
        if cell.infected {
            annotations.push(Annotation {
                bbox: cell.bbox,
                cls: CellClass::Infected,
            });
        }
    }
    (canvas.quantize(), annotations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hue_rotation_round_trips() {
        let c = [205.0, 102.0, 124.0];
        let r = rotate_hue(rotate_hue(c, 120.0), -120.0);
        for (a, b) in c.iter().zip(&r) {
            assert!((a - b).abs() < 0.5, "{c:?} vs {r:?}");
        }
    }

    #[test]
    fn hue_rotation_changes_color() {
        let c = [205.0, 102.0, 124.0];
        let r = rotate_hue(c, 60.0);
        assert!((c[0] - r[0]).abs() + (c[1] - r[1]).abs() + (c[2] - r[2]).abs() > 10.0);
    }
}

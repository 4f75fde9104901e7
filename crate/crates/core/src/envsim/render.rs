//! Egocentric pseudo-3D rendering: one ray per image column across a 90
//! degree frontal field; an object hit paints a vertical bar of its intent
//! color with height inversely proportional to perpendicular distance.

use super::env::{DomainParams, EnvConfig, EnvState};

/// 8-bit RGB image, row-major HWC. Rendering quantizes to the palette
/// directly, so PNG round-trips are byte-exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObsImage {
    pub size: usize,
    pub data: Vec<u8>,
}

impl ObsImage {
    pub fn filled(size: usize, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&color);
        }
        Self { size, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.size + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn set_pixel(&mut self, row: usize, col: usize, color: [u8; 3]) {
        let i = (row * self.size + col) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Channel-first floats in [0,1] for encoder input.
    pub fn to_chw_f64(&self) -> Vec<f64> {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.data[p * 3 + c] as f64 / 255.0;
            }
        }
        out
    }
}

struct RayHit {
    distance: f64,
    intent: usize,
}

/// Cast a ray from the agent cell center; return the first object cell hit
/// within the grid, with the distance to the cell entry point.
fn cast_ray(state: &EnvState, grid: i32, dir: (f64, f64)) -> Option<RayHit> {
    let pos = (state.agent.0 as f64 + 0.5, state.agent.1 as f64 + 0.5);
    let mut cell = state.agent;
    let step = (dir.0.signum() as i32, dir.1.signum() as i32);
    let inv = (
        if dir.0 != 0.0 { (1.0 / dir.0).abs() } else { f64::INFINITY },
        if dir.1 != 0.0 { (1.0 / dir.1).abs() } else { f64::INFINITY },
    );
    // distance along ray to the first x/y cell boundary
    let mut tmax = (
        if dir.0 > 0.0 {
            (cell.0 as f64 + 1.0 - pos.0) * inv.0
        } else if dir.0 < 0.0 {
            (pos.0 - cell.0 as f64) * inv.0
        } else {
            f64::INFINITY
        },
        if dir.1 > 0.0 {
            (cell.1 as f64 + 1.0 - pos.1) * inv.1
        } else if dir.1 < 0.0 {
            (pos.1 - cell.1 as f64) * inv.1
        } else {
            f64::INFINITY
        },
    );
    loop {
        let t;
        if tmax.0 < tmax.1 {
            t = tmax.0;
            cell.0 += step.0;
            tmax.0 += inv.0;
        } else {
            t = tmax.1;
            cell.1 += step.1;
            tmax.1 += inv.1;
        }
        if cell.0 < 0 || cell.1 < 0 || cell.0 >= grid || cell.1 >= grid {
            return None;
        }
        if let Some(obj) = state.objects.iter().find(|o| o.cell == cell) {
            return Some(RayHit { distance: t.max(1e-6), intent: obj.intent });
        }
    }
}

pub fn render(state: &EnvState, cfg: &EnvConfig, domain: &DomainParams) -> ObsImage {
    let n = cfg.image_size;
    let mut img = ObsImage::filled(n, domain.sky);
    let forward = state.heading.vector();
    // camera plane spans the 90 degree field (|plane| = tan(45 deg) = 1)
    let plane = (-forward.1, forward.0);
    for col in 0..n {
        let xcam = 2.0 * (col as f64 + 0.5) / n as f64 - 1.0;
        let dir = (forward.0 + plane.0 * xcam, forward.1 + plane.1 * xcam);
        let hit = cast_ray(state, cfg.grid_size as i32, dir);
        let (bar, color) = match hit {
            Some(h) => {
                // the DDA parameter is already the perpendicular (fisheye
                // corrected) distance since dir = forward + plane*xcam
                let height = ((n as f64 / h.distance).round() as usize).clamp(1, n);
                (height, Some(domain.object_colors[h.intent]))
            }
            None => (0, None),
        };
        let top = (n - bar) / 2;
        let bottom = top + bar;
        for row in 0..n {
            if row >= top && row < bottom {
                img.set_pixel(row, col, color.unwrap());
            } else if (bar == 0 && row >= n / 2) || (bar > 0 && row >= bottom) {
                img.set_pixel(row, col, domain.floor);
            }
            // rows above keep the sky fill
        }
    }
    img
}

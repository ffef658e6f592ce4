//! Pixel-level contrast overlays for image counterfactuals.
//!
//! Every pixel whose intensity changed spreads a Gaussian bump of mass `|delta|`
//! into one mask: amplified pixels into the pertinent-negative mask, reduced
//! pixels into the pertinent-positive mask. Bumps are truncated at radius
//! `4 * kernel_sigma` and normalized over the image grid.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::VALUE_TOLERANCE;
use crate::error::{Error, Result};

pub const DEFAULT_KERNEL_SIGMA: f64 = 1.0;

/// Truncation radius of a bump, in units of `kernel_sigma`.
pub const KERNEL_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Unchanged,
    /// Intensity reduced in the counterfactual.
    Pp,
    /// Intensity amplified in the counterfactual.
    Pn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastOverlay {
    pub width: usize,
    pub height: usize,
    pub kernel_sigma: f64,
    /// Row-major, in [0, 1].
    pub pp_mask: Vec<f64>,
    pub pn_mask: Vec<f64>,
    /// Which mask each pixel's own change fed.
    pub provenance: Vec<Provenance>,
    /// Joint maximum of the unnormalized masks; 0 when nothing changed.
    pub scale: f64,
}

/// Unnormalized (pp, pn) masks; each sums to the total `|delta|` of its pixels.
pub fn raw_masks(
    x: &[f64],
    x_prime: &[f64],
    width: usize,
    height: usize,
    kernel_sigma: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shape(x, x_prime, width, height, kernel_sigma)?;
    let mut pp = vec![0.0; width * height];
    let mut pn = vec![0.0; width * height];
    let radius = KERNEL_RADIUS * kernel_sigma;
    let reach = radius.floor() as isize;
    for cy in 0..height {
        for cx in 0..width {
            let c = cy * width + cx;
            let delta = x_prime[c] - x[c];
            if delta.abs() <= VALUE_TOLERANCE {
                continue;
            }
            let target = if delta > 0.0 { &mut pn } else { &mut pp };
            let mut bump = Vec::new();
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (px, py) = (cx as isize + dx, cy as isize + dy);
                    if px < 0 || py < 0 || px >= width as isize || py >= height as isize {
                        continue;
                    }
                    let d2 = (dx * dx + dy * dy) as f64;
                    if d2.sqrt() > radius {
                        continue;
                    }
                    bump.push((
                        py as usize * width + px as usize,
                        (-d2 / (2.0 * kernel_sigma * kernel_sigma)).exp(),
                    ));
                }
            }
            let mass: f64 = bump.iter().map(|(_, v)| v).sum();
            for (p, v) in bump {
                target[p] += delta.abs() * v / mass;
            }
        }
    }
    Ok((pp, pn))
}

fn check_shape(
    x: &[f64],
    x_prime: &[f64],
    width: usize,
    height: usize,
    kernel_sigma: f64,
) -> Result<()> {
    if x.len() != width * height {
        return Err(Error::Dimension {
            expected: width * height,
            got: x.len(),
        });
    }
    if x_prime.len() != x.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: x_prime.len(),
        });
    }
    if !(kernel_sigma > 0.0 && kernel_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "kernel_sigma must be positive, got {kernel_sigma}"
        )));
    }
    Ok(())
}

pub fn render_contrast(
    x: &[f64],
    x_prime: &[f64],
    width: usize,
    height: usize,
    kernel_sigma: f64,
) -> Result<ContrastOverlay> {
    let (mut pp, mut pn) = raw_masks(x, x_prime, width, height, kernel_sigma)?;
    let scale = pp.iter().chain(&pn).copied().fold(0.0, f64::max);
    if scale > 0.0 {
        pp.iter_mut().chain(pn.iter_mut()).for_each(|v| *v /= scale);
    }
    let provenance = x
        .iter()
        .zip(x_prime)
        .map(|(a, b)| {
            let delta = b - a;
            if delta.abs() <= VALUE_TOLERANCE {
                Provenance::Unchanged
            } else if delta > 0.0 {
                Provenance::Pn
            } else {
                Provenance::Pp
            }
        })
        .collect();
    Ok(ContrastOverlay {
        width,
        height,
        kernel_sigma,
        pp_mask: pp,
        pn_mask: pn,
        provenance,
        scale,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl ContrastOverlay {
    /// Binary PPM with PP in red and PN in green over an optional grayscale
    /// base image in [0, 1], each pixel repeated `zoom` times per axis.
    pub fn write_ppm<W: Write>(
        &self,
        out: &mut W,
        base: Option<&[f64]>,
        zoom: usize,
    ) -> std::io::Result<()> {
        let zoom = zoom.max(1);
        write!(
            out,
            "P6\n{} {}\n255\n",
            self.width * zoom,
            self.height * zoom
        )?;
        for y in 0..self.height * zoom {
            for x in 0..self.width * zoom {
                let p = (y / zoom) * self.width + x / zoom;
                let gray = base.map_or(0.0, |b| 0.35 * b[p]);
                let r = gray.max(self.pp_mask[p]);
                let g = gray.max(self.pn_mask[p]);
                out.write_all(&[to_byte(r), to_byte(g), to_byte(gray)])?;
            }
        }
        Ok(())
    }

    /// Binary PGM of one mask.
    pub fn write_pgm<W: Write>(
        &self,
        out: &mut W,
        mask: &[f64],
        zoom: usize,
    ) -> std::io::Result<()> {
        let zoom = zoom.max(1);
        write!(
            out,
            "P5\n{} {}\n255\n",
            self.width * zoom,
            self.height * zoom
        )?;
        for y in 0..self.height * zoom {
            for x in 0..self.width * zoom {
                out.write_all(&[to_byte(mask[(y / zoom) * self.width + x / zoom])])?;
            }
        }
        Ok(())
    }

    pub fn save_ppm(
        &self,
        path: impl AsRef<Path>,
        base: Option<&[f64]>,
        zoom: usize,
    ) -> Result<()> {
        let path = path.as_ref();
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_ppm(&mut file, base, zoom)
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(path, e))
    }
}

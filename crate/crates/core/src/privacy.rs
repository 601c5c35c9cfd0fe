//! Pixelization of privacy-sensitive image regions.
//!
//! Downsampling at an integer factor with box averaging followed by
//! nearest-neighbor upsampling is exactly a-by-a block averaging, so that is
//! what this module computes: inside each masked grid, every a x a block is
//! replaced by its mean. Regions whose dimensions are not multiples of the
//! factor are expanded to the next multiple, clamped at the image border;
//! leftover partial blocks at the border average over their actual extent.

use serde::{Deserialize, Serialize};

use crate::dataio::{Image, MaskRegion};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum PixelizeMode {
    RegionOnly,
    WholeImage,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PixelizeConfig {
    pub factor: usize,
    pub mode: PixelizeMode,
}

impl Default for PixelizeConfig {
    fn default() -> Self {
        PixelizeConfig {
            factor: 8,
            mode: PixelizeMode::RegionOnly,
        }
    }
}

/// Expand [lo, hi) to the next multiple of `a`, clamped to [0, bound).
/// Growth is split between the two sides, spilling to the other side when a
/// border is hit; if the image itself is shorter than the target the whole
/// axis is used.
fn expand_span(lo: usize, hi: usize, a: usize, bound: usize) -> (usize, usize) {
    let len = hi - lo;
    if len == 0 {
        return (lo, hi);
    }
    let target = len.div_ceil(a) * a;
    if target >= bound {
        return (0, bound);
    }
    let grow = target - len;
    let grow_lo = (grow / 2).min(lo);
    let mut new_lo = lo - grow_lo;
    let mut new_hi = new_lo + target;
    if new_hi > bound {
        new_hi = bound;
        new_lo = bound - target;
    }
    (new_lo, new_hi)
}

fn average_region(image: &mut Image, region: &MaskRegion, a: usize) {
    let channels = image.channels;
    let mut r0 = region.row0;
    while r0 < region.row1 {
        let r1 = (r0 + a).min(region.row1);
        let mut c0 = region.col0;
        while c0 < region.col1 {
            let c1 = (c0 + a).min(region.col1);
            for ch in 0..channels {
                let mut sum = 0.0;
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in r0..r1 {
                    for c in c0..c1 {
                        let v = image.get(r, c, ch);
                        sum += v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                // A constant block averages to exactly that constant; the
                // explicit branch keeps repeated application bit-stable.
                let mean = if lo == hi {
                    lo
                } else {
                    sum / ((r1 - r0) * (c1 - c0)) as f64
                };
                for r in r0..r1 {
                    for c in c0..c1 {
                        let idx = image.idx(r, c, ch);
                        image.pixels[idx] = mean;
                    }
                }
            }
            c0 = c1;
        }
        r0 = r1;
    }
}

/// Pixelize an image according to the config. The output has the same
/// shape and mask regions as the input; with factor 1 it is an exact copy.
pub fn pixelize(image: &Image, cfg: &PixelizeConfig) -> Result<Image> {
    if cfg.factor < 1 {
        return Err(Error::invalid("pixelization factor must be at least 1"));
    }
    if cfg.factor == 1 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    match cfg.mode {
        PixelizeMode::WholeImage => {
            let all = MaskRegion {
                row0: 0,
                col0: 0,
                row1: image.height,
                col1: image.width,
            };
            average_region(&mut out, &all, cfg.factor);
        }
        PixelizeMode::RegionOnly => {
            for region in &image.mask_regions {
                let (row0, row1) = expand_span(region.row0, region.row1, cfg.factor, image.height);
                let (col0, col1) = expand_span(region.col0, region.col1, cfg.factor, image.width);
                let expanded = MaskRegion {
                    row0,
                    col0,
                    row1,
                    col1,
                };
                average_region(&mut out, &expanded, cfg.factor);
            }
        }
    }
    Ok(out)
}

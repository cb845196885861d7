//! Photometric and geometric input noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::resize;
use crate::error::Result;
use crate::tensor::Tensor;

/// Side fraction kept by a random crop.
pub const CROP_FRACTION: f64 = 0.875;
pub const BRIGHTNESS_RANGE: (f32, f32) = (0.8, 1.25);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentSwitches {
    pub flip: bool,
    pub crop: bool,
    pub brightness: bool,
}

impl Default for AugmentSwitches {
    fn default() -> Self {
        Self::all()
    }
}

impl AugmentSwitches {
    pub fn all() -> Self {
        Self {
            flip: true,
            crop: true,
            brightness: true,
        }
    }

    pub fn none() -> Self {
        Self {
            flip: false,
            crop: false,
            brightness: false,
        }
    }

    pub fn any(&self) -> bool {
        self.flip || self.crop || self.brightness
    }
}

/// Applies each enabled transform independently with probability 0.5.
pub fn augment<R: Rng>(image: &Tensor, switches: &AugmentSwitches, rng: &mut R) -> Result<Tensor> {
    augment_with_probability(image, switches, 0.5, rng)
}

/// [`augment`] with an explicit per-transform probability `p`.
///
/// The random stream consumed depends only on the coin outcomes, never on
/// the switches, so toggling one transform does not reshuffle the others.
pub fn augment_with_probability<R: Rng>(
    image: &Tensor,
    switches: &AugmentSwitches,
    p: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    let mut out = image.clone();

    let flip = rng.random::<f64>() < p;
    if flip && switches.flip {
        let src = image.data();
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let from = (y * w + (w - 1 - x)) * c;
                dst[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&src[from..from + c]);
            }
        }
    }

    if rng.random::<f64>() < p {
        let ch = ((h as f64 * CROP_FRACTION).round() as usize).max(1);
        let cw = ((w as f64 * CROP_FRACTION).round() as usize).max(1);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        if switches.crop {
            let src = out.data();
            let mut crop = Vec::with_capacity(ch * cw * c);
            for y in top..top + ch {
                crop.extend_from_slice(&src[(y * w + left) * c..(y * w + left + cw) * c]);
            }
            out = resize(&Tensor::new(vec![ch, cw, c], crop)?, h, w)?;
        }
    }

    if rng.random::<f64>() < p {
        let factor = rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
        if switches.brightness {
            for v in out.data_mut() {
                *v = (*v * factor).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

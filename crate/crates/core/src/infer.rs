//! Whole-image inference: reflect padding to the network's spatial multiple.

use crate::error::{Error, Result};
use crate::net::{Net, SPATIAL_MULTIPLE};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Pads bottom and right by mirror reflection (edge pixel not repeated)
/// up to the next multiple of `multiple`.
pub fn pad_reflect<T: Scalar>(img: &Tensor<T>, multiple: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.dims4()?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let d = img.data();
    Ok(Tensor::from_fn(vec![n, c, ph, pw], |i| {
        let (plane, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        d[(plane * h + reflect(y as isize, h)) * w + reflect(x as isize, w)]
    }))
}

/// Top-left `h × w` window.
pub fn crop<T: Scalar>(img: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, ih, iw) = img.dims4()?;
    if h > ih || w > iw {
        return Err(Error::shape("crop", format!("{h}x{w} exceeds {ih}x{iw}")));
    }
    let d = img.data();
    Ok(Tensor::from_fn(vec![n, c, h, w], |i| {
        let (plane, y, x) = (i / (h * w), (i / w) % h, i % w);
        d[(plane * ih + y) * iw + x]
    }))
}

/// Restores an image of any size: pad, run, crop the full-scale output.
pub fn restore<T: Scalar>(net: &Net, store: &ParamStore<T>, img: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = img.dims4()?;
    let padded = pad_reflect(img, SPATIAL_MULTIPLE)?;
    let [full, _, _] = net.infer(store, &padded)?;
    crop(&full, h, w)
}

//! Binary morphology: erosion with a 5x5 diamond structuring element.

use super::BinaryMask;

/// Offsets with L1 norm at most 2 (the 5x5 diamond, 13 points).
const DIAMOND5: [(isize, isize); 13] = [
    (-2, 0),
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -2),
    (0, -1),
    (0, 0),
    (0, 1),
    (0, 2),
    (1, -1),
    (1, 0),
    (1, 1),
    (2, 0),
];

/// Erode with the 5x5 diamond: a pixel survives only when every diamond
/// offset lands on a set pixel. Offsets falling outside the frame count as
/// unset, so the border always erodes.
pub fn erode_diamond5(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = BinaryMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let keep = DIAMOND5.iter().all(|&(dy, dx)| {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                ny >= 0
                    && nx >= 0
                    && ny < h as isize
                    && nx < w as isize
                    && mask.get(ny as usize, nx as usize)
            });
            if keep {
                out.set(y, x, true);
            }
        }
    }
    out
}

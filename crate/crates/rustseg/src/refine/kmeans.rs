//! Two-cluster K-means over RGB triples (Lloyd's algorithm) and the
//! overlap-based cluster selection used by the advanced refinement path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BinaryMask, MaskU8};
use crate::error::{Error, Result};
use crate::imageio::RgbImage;

const MAX_ITERATIONS: usize = 50;

/// Result of a two-cluster color segmentation. The masks partition the
/// image: every pixel belongs to exactly one cluster.
#[derive(Debug, Clone)]
pub struct Kmeans2 {
    pub clusters: [BinaryMask; 2],
    pub centers: [[f32; 3]; 2],
    /// Total within-cluster squared distance after each assignment step;
    /// non-increasing across Lloyd iterations.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// Set when the image could not support two distinct centers (e.g. a
    /// single-color image); one cluster then holds everything.
    pub degenerate: bool,
}

/// Lloyd's algorithm with k = 2 in RGB space. Centers start at two distinct
/// pixel colors drawn uniformly at random (re-drawn on collision); iteration
/// stops when assignments no longer change or after 50 rounds. An emptied
/// cluster is re-seeded from the pixel farthest from the other center.
/// Deterministic for a fixed seed.
pub fn kmeans2(image: &RgbImage, seed: u64) -> Result<Kmeans2> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let colors: Vec<[f32; 3]> = (0..n)
        .map(|i| {
            let p = image.pixel_at(i);
            [p[0] as f32, p[1] as f32, p[2] as f32]
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = colors[rng.gen_range(0..n)];
    let mut second = None;
    for _ in 0..64 {
        let candidate = colors[rng.gen_range(0..n)];
        if candidate != first {
            second = Some(candidate);
            break;
        }
    }
    let degenerate_init = second.is_none();
    let mut centers = [first, second.unwrap_or(first)];

    let mut assignment = vec![0u8; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut degenerate = degenerate_init;

    for _ in 0..MAX_ITERATIONS {
        iterations += 1;
        // Assignment step; ties go to cluster 0.
        let mut changed = false;
        let mut obj = 0.0f64;
        for (i, c) in colors.iter().enumerate() {
            let d0 = dist2(c, &centers[0]);
            let d1 = dist2(c, &centers[1]);
            let a = if d1 < d0 { 1u8 } else { 0u8 };
            obj += d0.min(d1) as f64;
            if assignment[i] != a {
                assignment[i] = a;
                changed = true;
            }
        }
        objective.push(obj);
        if !changed && iterations > 1 {
            break;
        }

        // Update step: means in f64, empty clusters re-seeded from the
        // farthest point.
        let mut sums = [[0.0f64; 3]; 2];
        let mut counts = [0usize; 2];
        for (i, c) in colors.iter().enumerate() {
            let a = assignment[i] as usize;
            counts[a] += 1;
            for ch in 0..3 {
                sums[a][ch] += c[ch] as f64;
            }
        }
        for k in 0..2 {
            if counts[k] == 0 {
                let other = centers[1 - k];
                let far = colors
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        dist2(a, &other)
                            .partial_cmp(&dist2(b, &other))
                            .expect("finite distances")
                    })
                    .map(|(i, _)| i)
                    .expect("image is nonempty");
                if dist2(&colors[far], &other) == 0.0 {
                    degenerate = true;
                }
                centers[k] = colors[far];
            } else {
                for ch in 0..3 {
                    centers[k][ch] = (sums[k][ch] / counts[k] as f64) as f32;
                }
            }
        }
    }

    let mut masks = [BinaryMask::new(h, w), BinaryMask::new(h, w)];
    for (i, &a) in assignment.iter().enumerate() {
        masks[a as usize].set(i / w, i % w, true);
    }
    if masks[0].count() == 0 || masks[1].count() == 0 {
        degenerate = true;
    }
    Ok(Kmeans2 {
        clusters: masks,
        centers,
        objective,
        iterations,
        degenerate,
    })
}

#[inline]
fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dr = a[0] - b[0];
    let dg = a[1] - b[1];
    let db = a[2] - b[2];
    dr * dr + dg * dg + db * db
}

/// Pick the cluster covering the most seed-mask area (pixels where the seed
/// is strictly positive). A tie goes to the cluster with the smaller total
/// area, the least over-segmenting choice.
pub fn select_cluster<'a>(
    clusters: &'a [BinaryMask; 2],
    seed_mask: &MaskU8,
) -> Result<&'a BinaryMask> {
    for m in clusters {
        if m.height() != seed_mask.height() || m.width() != seed_mask.width() {
            return Err(Error::Dimension(format!(
                "cluster {}x{} and seed mask {}x{} differ",
                m.height(),
                m.width(),
                seed_mask.height(),
                seed_mask.width()
            )));
        }
    }
    if seed_mask.is_empty() {
        return Err(Error::Config(
            "seed mask is empty; nothing to match a cluster against".into(),
        ));
    }
    let overlap = |m: &BinaryMask| {
        m.data()
            .iter()
            .zip(seed_mask.data())
            .filter(|(&inside, &v)| inside && v > 0)
            .count()
    };
    let (o0, o1) = (overlap(&clusters[0]), overlap(&clusters[1]));
    let pick = match o0.cmp(&o1) {
        std::cmp::Ordering::Greater => 0,
        std::cmp::Ordering::Less => 1,
        std::cmp::Ordering::Equal => {
            if clusters[0].count() <= clusters[1].count() {
                0
            } else {
                1
            }
        }
    };
    Ok(&clusters[pick])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tone_image(h: usize, w: usize, split_col: usize, a: [u8; 3], b: [u8; 3]) -> RgbImage {
        let mut img = RgbImage::new(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(y, x, if x < split_col { a } else { b });
            }
        }
        img
    }

    #[test]
    fn black_and_white_separates_exactly() {
        let img = two_tone_image(6, 8, 3, [0, 0, 0], [255, 255, 255]);
        let km = kmeans2(&img, 7).unwrap();
        assert!(!km.degenerate);
        // One cluster is exactly the black region, the other the white one.
        let black = &km.clusters[if km.centers[0][0] < km.centers[1][0] { 0 } else { 1 }];
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(black.get(y, x), x < 3, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn clusters_partition_the_image() {
        let mut img = RgbImage::new(9, 9);
        for i in 0..81 {
            img.set_pixel_at(i, [(i * 3) as u8, (i * 7 % 256) as u8, (255 - i * 2) as u8]);
        }
        let km = kmeans2(&img, 3).unwrap();
        for i in 0..81 {
            let in0 = km.clusters[0].data()[i];
            let in1 = km.clusters[1].data()[i];
            assert!(in0 ^ in1, "pixel {i} must be in exactly one cluster");
        }
    }

    #[test]
    fn objective_descends_monotonically() {
        let mut img = RgbImage::new(12, 12);
        for i in 0..144 {
            let v = ((i * 37) % 250) as u8;
            img.set_pixel_at(i, [v, 255 - v, (i % 97) as u8]);
        }
        for seed in 0..5 {
            let km = kmeans2(&img, seed).unwrap();
            for pair in km.objective.windows(2) {
                assert!(
                    pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-9,
                    "objective rose: {} -> {} (seed {seed})",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn three_color_image_finds_the_best_bipartition() {
        // Thirds of red, green and blue: the optimal 2-way split must match
        // the best of the three possible merges, found exhaustively.
        let (h, w) = (6, 9);
        let colors = [[220u8, 30, 30], [30, 220, 30], [30, 30, 220]];
        let mut img = RgbImage::new(h, w);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(y, x, colors[x / 3]);
            }
        }
        // Exhaustive oracle over the three candidate bipartitions.
        let count_per_third = (h * w / 3) as f64;
        let mut best = f64::INFINITY;
        for merged in 0..3 {
            let (a, b) = match merged {
                0 => (1, 2), // red alone, green+blue merged
                1 => (0, 2),
                _ => (0, 1),
            };
            let ca = colors[a].map(|v| v as f64);
            let cb = colors[b].map(|v| v as f64);
            let mean: Vec<f64> = (0..3).map(|i| (ca[i] + cb[i]) / 2.0).collect();
            let mut cost = 0.0;
            for c in [ca, cb] {
                let d: f64 = (0..3).map(|i| (c[i] - mean[i]).powi(2)).sum();
                cost += d * count_per_third;
            }
            best = best.min(cost);
        }
        let km = kmeans2(&img, 11).unwrap();
        let achieved = *km.objective.last().unwrap();
        assert!(
            (achieved - best).abs() < 1e-3 * best.max(1.0),
            "achieved {achieved}, optimal bipartition {best}"
        );
    }

    #[test]
    fn single_color_image_is_degenerate() {
        let img = two_tone_image(4, 4, 4, [90, 90, 90], [0, 0, 0]);
        let km = kmeans2(&img, 1).unwrap();
        assert!(km.degenerate);
        let total = km.clusters[0].count() + km.clusters[1].count();
        assert_eq!(total, 16);
        assert!(km.clusters[0].count() == 16 || km.clusters[1].count() == 16);
    }

    #[test]
    fn selection_by_containment() {
        let img = two_tone_image(4, 8, 4, [0, 0, 0], [255, 255, 255]);
        let km = kmeans2(&img, 9).unwrap();
        let mut seed = MaskU8::zeros(4, 8);
        seed.set(1, 1, 200); // inside the dark half
        let chosen = select_cluster(&km.clusters, &seed).unwrap();
        assert!(chosen.get(1, 1));
        assert_eq!(chosen.count(), 16);
    }

    #[test]
    fn selection_by_majority_overlap() {
        let mut clusters = [BinaryMask::new(1, 10), BinaryMask::new(1, 10)];
        for x in 0..10 {
            clusters[usize::from(x >= 7)].set(0, x, true);
        }
        // Seed covers pixels 0..10, weighted 7:3 toward cluster 0.
        let mut seed = MaskU8::zeros(1, 10);
        for x in 0..10 {
            seed.set(0, x, 10);
        }
        let chosen = select_cluster(&clusters, &seed).unwrap();
        assert_eq!(chosen.count(), 7);
    }

    #[test]
    fn selection_tie_prefers_the_smaller_cluster() {
        // Clusters of sizes 6 and 4 in a 1x10 frame; the seed overlaps two
        // pixels of each.
        let mut clusters = [BinaryMask::new(1, 10), BinaryMask::new(1, 10)];
        for x in 0..6 {
            clusters[0].set(0, x, true);
        }
        for x in 6..10 {
            clusters[1].set(0, x, true);
        }
        let mut seed = MaskU8::zeros(1, 10);
        for x in [0, 1, 6, 7] {
            seed.set(0, x, 255);
        }
        let chosen = select_cluster(&clusters, &seed).unwrap();
        assert_eq!(chosen.count(), 4, "tie must pick the smaller cluster");
    }

    #[test]
    fn empty_seed_is_an_error() {
        let clusters = [BinaryMask::new(2, 2), BinaryMask::new(2, 2)];
        let seed = MaskU8::zeros(2, 2);
        assert!(matches!(
            select_cluster(&clusters, &seed),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let mut img = RgbImage::new(8, 8);
        for i in 0..64 {
            img.set_pixel_at(i, [(i * 5) as u8, (i * 11 % 256) as u8, (i * 3) as u8]);
        }
        let a = kmeans2(&img, 42).unwrap();
        let b = kmeans2(&img, 42).unwrap();
        assert_eq!(a.clusters[0], b.clusters[0]);
        assert_eq!(a.centers, b.centers);
    }
}

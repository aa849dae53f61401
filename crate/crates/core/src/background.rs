//! Image-adaptive background prototype.
//!
//! A fixed "background" embedding describes every image with the same vector,
//! which fits actual background appearance poorly and pulls novel objects into
//! the background slot.  Instead, the classifier can pool the feature map over
//! the region no instance mask claims, yielding a per-image prototype that
//! tracks what background really looks like in that image.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, FeatureMap};

/// Pixelwise maximum over instance masks: the region any instance claims.
///
/// An empty mask list yields an all-zero mask of the given shape.
pub fn foreground_union(masks: &[BinaryMask], height: usize, width: usize) -> Result<BinaryMask> {
    if height == 0 || width == 0 {
        return Err(Error::Shape("mask grid must have positive dimensions".into()));
    }
    let mut union = BinaryMask::zeros(height, width);
    for mask in masks {
        if mask.shape() != (height, width) {
            return Err(Error::Shape(format!(
                "mask shape {:?} differs from grid ({height}, {width})",
                mask.shape()
            )));
        }
        for y in 0..height {
            for x in 0..width {
                if mask.get(y, x) == 1 {
                    union.set(y, x, true);
                }
            }
        }
    }
    Ok(union)
}

/// Complement of the foreground union.
pub fn background_mask(foreground: &BinaryMask) -> BinaryMask {
    let mut bg = BinaryMask::zeros(foreground.height(), foreground.width());
    for y in 0..foreground.height() {
        for x in 0..foreground.width() {
            bg.set(y, x, foreground.get(y, x) == 0);
        }
    }
    bg
}

/// Mask-average-pooled background feature, or the static fallback embedding
/// if the foreground covers everything.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPrototype {
    pub vector: Array1<f64>,
    /// True when the background region was empty and `fallback` was returned.
    pub used_fallback: bool,
}

/// Average the feature map over a mask's set pixels; `None` when the mask is
/// empty.
///
/// Accumulation runs pixel by pixel in row-major order, so the result is
/// reproducible bit for bit.
pub fn mask_average_pool(features: &FeatureMap, mask: &BinaryMask) -> Result<Option<Array1<f64>>> {
    if !features.same_grid_as(mask) {
        return Err(Error::Shape(format!(
            "mask ({}, {}) and feature map ({}, {}) grids differ",
            mask.height(),
            mask.width(),
            features.height(),
            features.width()
        )));
    }
    let count = mask.area();
    if count == 0 {
        return Ok(None);
    }
    let mut sum = Array1::<f64>::zeros(features.channels());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == 1 {
                sum += &features.at(y, x);
            }
        }
    }
    Ok(Some(sum / count as f64))
}

/// Average the feature map over the background mask.
pub fn background_prototype(
    background: &BinaryMask,
    features: &FeatureMap,
    fallback: ArrayView1<'_, f64>,
) -> Result<BackgroundPrototype> {
    if fallback.len() != features.channels() {
        return Err(Error::Shape(format!(
            "fallback has {} channels, feature map has {}",
            fallback.len(),
            features.channels()
        )));
    }
    Ok(match mask_average_pool(features, background)? {
        Some(vector) => BackgroundPrototype {
            vector,
            used_fallback: false,
        },
        None => BackgroundPrototype {
            vector: fallback.to_owned(),
            used_fallback: true,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn feature_2x2() -> FeatureMap {
        // Single channel holding 1, 2 / 3, 4.
        let mut grid = Array3::zeros((2, 2, 1));
        grid[(0, 0, 0)] = 1.0;
        grid[(0, 1, 0)] = 2.0;
        grid[(1, 0, 0)] = 3.0;
        grid[(1, 1, 0)] = 4.0;
        FeatureMap::new(grid).unwrap()
    }

    #[test]
    fn union_of_disjoint_single_pixels_has_both() {
        let mut a = BinaryMask::zeros(2, 2);
        a.set(0, 0, true);
        let mut b = BinaryMask::zeros(2, 2);
        b.set(1, 1, true);
        let u = foreground_union(&[a, b], 2, 2).unwrap();
        assert_eq!(u.get(0, 0), 1);
        assert_eq!(u.get(1, 1), 1);
        assert_eq!(u.area(), 2);
    }

    #[test]
    fn union_is_idempotent() {
        let mut a = BinaryMask::zeros(2, 2);
        a.set(0, 1, true);
        let once = foreground_union(&[a.clone()], 2, 2).unwrap();
        let twice = foreground_union(&[a.clone(), a], 2, 2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn union_of_nothing_is_empty() {
        let u = foreground_union(&[], 4, 4).unwrap();
        assert!(u.is_empty());
        assert_eq!(u.shape(), (4, 4));
    }

    #[test]
    fn union_rejects_mixed_shapes() {
        let a = BinaryMask::zeros(2, 2);
        let b = BinaryMask::zeros(3, 2);
        assert!(matches!(
            foreground_union(&[a, b], 2, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn background_complements_foreground() {
        let mut fg = BinaryMask::zeros(2, 3);
        fg.set(0, 0, true);
        fg.set(1, 2, true);
        let bg = background_mask(&fg);
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(fg.get(y, x) + bg.get(y, x), 1, "pixel ({y}, {x})");
            }
        }
    }

    #[test]
    fn all_background_pools_the_whole_map() {
        let bg = background_mask(&BinaryMask::zeros(2, 2));
        let p = background_prototype(&bg, &feature_2x2(), array![0.0].view()).unwrap();
        assert!(!p.used_fallback);
        assert_abs_diff_eq!(p.vector[0], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn pooling_averages_only_background_pixels() {
        // Foreground claims the corners holding 1 and 4; background holds 2, 3.
        let mut fg = BinaryMask::zeros(2, 2);
        fg.set(0, 0, true);
        fg.set(1, 1, true);
        let bg = background_mask(&fg);
        let p = background_prototype(&bg, &feature_2x2(), array![0.0].view()).unwrap();
        assert_abs_diff_eq!(p.vector[0], 2.5, epsilon = 1e-15);

        // Background restricted to the left column holds 1, 3.
        let mut fg = BinaryMask::zeros(2, 2);
        fg.set(0, 1, true);
        fg.set(1, 1, true);
        let bg = background_mask(&fg);
        let p = background_prototype(&bg, &feature_2x2(), array![0.0].view()).unwrap();
        assert_abs_diff_eq!(p.vector[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_background_falls_back_to_static_embedding() {
        let mut fg = BinaryMask::zeros(2, 2);
        for y in 0..2 {
            for x in 0..2 {
                fg.set(y, x, true);
            }
        }
        let bg = background_mask(&fg);
        let p = background_prototype(&bg, &feature_2x2(), array![0.25].view()).unwrap();
        assert!(p.used_fallback);
        assert_abs_diff_eq!(p.vector[0], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn pooling_rejects_grid_mismatches() {
        let bg = BinaryMask::zeros(3, 2);
        assert!(matches!(
            background_prototype(&bg, &feature_2x2(), array![0.0].view()),
            Err(Error::Shape(_))
        ));
        let bg = background_mask(&BinaryMask::zeros(2, 2));
        assert!(matches!(
            background_prototype(&bg, &feature_2x2(), array![0.0, 1.0].view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pooling_matches_naive_double_loop_bit_for_bit() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let (h, w, d) = (8, 8, 3);
            let grid = Array3::from_shape_fn((h, w, d), |_| rng.random::<f64>() * 4.0 - 2.0);
            let features = FeatureMap::new(grid.clone()).unwrap();
            let mut bg = BinaryMask::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    bg.set(y, x, rng.random::<f64>() < 0.6);
                }
            }
            if bg.is_empty() {
                continue;
            }
            let p = background_prototype(&bg, &features, array![0.0, 0.0, 0.0].view()).unwrap();
            for c in 0..d {
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for y in 0..h {
                    for x in 0..w {
                        if bg.get(y, x) == 1 {
                            sum += grid[(y, x, c)];
                            count += 1;
                        }
                    }
                }
                let naive = sum / count as f64;
                assert_eq!(p.vector[c].to_bits(), naive.to_bits());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn union_and_complement_partition_the_grid(
            bits in proptest::collection::vec(proptest::bool::ANY, 36),
            splits in proptest::collection::vec(0usize..3, 36),
        ) {
            // Scatter the foreground over up to three masks.
            let mut masks = vec![BinaryMask::zeros(6, 6); 3];
            for (i, (&on, &which)) in bits.iter().zip(&splits).enumerate() {
                if on {
                    masks[which].set(i / 6, i % 6, true);
                }
            }
            let fg = foreground_union(&masks, 6, 6).unwrap();
            let bg = background_mask(&fg);
            for y in 0..6 {
                for x in 0..6 {
                    prop_assert_eq!(fg.get(y, x) + bg.get(y, x), 1);
                }
            }
        }

        #[test]
        fn pooled_channels_stay_within_observed_range(
            values in proptest::collection::vec(-5.0f64..5.0, 32),
            mask_bits in proptest::collection::vec(proptest::bool::ANY, 16),
        ) {
            let grid = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| values[(y * 4 + x) * 2 + c]);
            let features = FeatureMap::new(grid.clone()).unwrap();
            let mut bg = BinaryMask::zeros(4, 4);
            for (i, &b) in mask_bits.iter().enumerate() {
                bg.set(i / 4, i % 4, b);
            }
            prop_assume!(!bg.is_empty());
            let p = background_prototype(&bg, &features, ndarray::array![0.0, 0.0].view()).unwrap();
            for c in 0..2 {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for y in 0..4 {
                    for x in 0..4 {
                        if bg.get(y, x) == 1 {
                            lo = lo.min(grid[(y, x, c)]);
                            hi = hi.max(grid[(y, x, c)]);
                        }
                    }
                }
                prop_assert!(p.vector[c] >= lo - 1e-12 && p.vector[c] <= hi + 1e-12);
            }
        }

        #[test]
        fn excluding_extreme_pixels_moves_the_mean_monotonically(
            values in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            // Removing the largest background pixel can only lower the mean.
            let grid = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| values[y * 4 + x]);
            let features = FeatureMap::new(grid.clone()).unwrap();
            let bg_all = background_mask(&BinaryMask::zeros(4, 4));
            let full = background_prototype(&bg_all, &features, ndarray::array![0.0].view())
                .unwrap()
                .vector[0];
            let (mut my, mut mx, mut best) = (0, 0, f64::NEG_INFINITY);
            for y in 0..4 {
                for x in 0..4 {
                    if grid[(y, x, 0)] > best {
                        best = grid[(y, x, 0)];
                        my = y;
                        mx = x;
                    }
                }
            }
            let mut fg = BinaryMask::zeros(4, 4);
            fg.set(my, mx, true);
            let bg = background_mask(&fg);
            let reduced = background_prototype(&bg, &features, ndarray::array![0.0].view())
                .unwrap()
                .vector[0];
            prop_assert!(reduced <= full + 1e-12);
        }
    }
}

//! Node sampling: stride-2 polyphase decomposition of a feature map into four
//! interleaved subsets, and its exact inverse.
//!
//! The four phases are indexed by (row parity, col parity) in the fixed order
//! (even,even), (even,odd), (odd,even), (odd,odd). Decompose/recompose are
//! pure index shuffles: no arithmetic is performed on the values, so the
//! round trip is bit-exact.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::FeatureMap;

/// Phase order for the four stride-2 subsets: (row parity, col parity).
pub const PHASES: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// The four polyphase subsets of a feature map, all C × H/2 × W/2.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetBundle {
    subsets: [FeatureMap; 4],
}

impl SubsetBundle {
    /// Builds a bundle from four equal-shape subsets in phase order.
    pub fn new(subsets: [FeatureMap; 4]) -> Result<Self> {
        let shape = subsets[0].shape();
        for (q, s) in subsets.iter().enumerate() {
            if s.shape() != shape {
                return Err(Error::Shape(format!(
                    "subset {} has shape {:?}, expected {:?}",
                    q,
                    s.shape(),
                    shape
                )));
            }
        }
        Ok(SubsetBundle { subsets })
    }

    pub fn subsets(&self) -> &[FeatureMap; 4] {
        &self.subsets
    }

    pub fn phase_labels(&self) -> [(usize, usize); 4] {
        PHASES
    }

    pub fn subset_shape(&self) -> (usize, usize, usize) {
        self.subsets[0].shape()
    }
}

/// Splits `f` into its four stride-2 phase subsets.
///
/// Subset `q` holds exactly the elements whose (row mod 2, col mod 2) equals
/// `PHASES[q]`; together the subsets partition `f` with nothing duplicated
/// or dropped.
pub fn nss_decompose(f: &FeatureMap) -> Result<SubsetBundle> {
    let (c, h, w) = f.shape();
    if h % 2 != 0 {
        return Err(Error::Dimension(format!("height {} is odd; stride-2 sampling needs even height", h)));
    }
    if w % 2 != 0 {
        return Err(Error::Dimension(format!("width {} is odd; stride-2 sampling needs even width", w)));
    }
    let (sh, sw) = (h / 2, w / 2);
    let src = f.data();
    let subsets = PHASES.map(|(pr, pc)| {
        let data = Array3::from_shape_fn((c, sh, sw), |(ci, r, col)| src[[ci, 2 * r + pr, 2 * col + pc]]);
        FeatureMap::from_array_unchecked(data)
    });
    Ok(SubsetBundle { subsets })
}

/// Re-interleaves four phase subsets back into the C × 2h × 2w map.
/// Exact inverse of [`nss_decompose`].
pub fn nss_recompose(bundle: &SubsetBundle) -> Result<FeatureMap> {
    let (c, sh, sw) = bundle.subset_shape();
    let mut out = Array3::zeros((c, 2 * sh, 2 * sw));
    for (q, (pr, pc)) in PHASES.iter().enumerate() {
        let sub = bundle.subsets[q].data();
        for ci in 0..c {
            for r in 0..sh {
                for col in 0..sw {
                    out[[ci, 2 * r + pr, 2 * col + pc]] = sub[[ci, r, col]];
                }
            }
        }
    }
    Ok(FeatureMap::from_array_unchecked(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmap(data: Array3<f64>) -> FeatureMap {
        FeatureMap::new(data).unwrap()
    }

    #[test]
    fn decompose_2x2_base_case() {
        let f = fmap(arr3(&[[[1.0, 2.0], [3.0, 4.0]]]));
        let b = nss_decompose(&f).unwrap();
        let vals: Vec<f64> = b.subsets().iter().map(|s| s.data()[[0, 0, 0]]).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn decompose_4x4_even_even_phase() {
        let f = FeatureMap::from_shape_fn(1, 4, 4, |_, r, c| (4 * r + c) as f64).unwrap();
        let b = nss_decompose(&f).unwrap();
        let ee = b.subsets()[0].data();
        assert_eq!(ee[[0, 0, 0]], 0.0);
        assert_eq!(ee[[0, 0, 1]], 2.0);
        assert_eq!(ee[[0, 1, 0]], 8.0);
        assert_eq!(ee[[0, 1, 1]], 10.0);
    }

    #[test]
    fn odd_height_rejected_naming_axis() {
        let f = FeatureMap::zeros(1, 3, 4);
        let err = nss_decompose(&f).unwrap_err();
        match err {
            Error::Dimension(msg) => assert!(msg.contains("height"), "message: {msg}"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn recompose_2x2_base_case() {
        let subsets = [1.0, 2.0, 3.0, 4.0].map(|v| fmap(arr3(&[[[v]]])));
        let b = SubsetBundle::new(subsets).unwrap();
        let f = nss_recompose(&b).unwrap();
        assert_eq!(f.data(), &arr3(&[[[1.0, 2.0], [3.0, 4.0]]]));
    }

    #[test]
    fn mismatched_subset_shapes_rejected() {
        let subsets = [
            FeatureMap::zeros(1, 2, 2),
            FeatureMap::zeros(1, 2, 2),
            FeatureMap::zeros(1, 2, 3),
            FeatureMap::zeros(1, 2, 2),
        ];
        assert!(matches!(SubsetBundle::new(subsets), Err(Error::Shape(_))));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = FeatureMap::from_shape_fn(3, 8, 8, |_, _, _| rng.random::<f64>() * 2.0 - 1.0).unwrap();
        let back = nss_recompose(&nss_decompose(&f).unwrap()).unwrap();
        assert_eq!(f.data(), back.data());
    }

    #[test]
    fn partition_preserves_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FeatureMap::from_shape_fn(2, 6, 10, |_, _, _| rng.random::<f64>()).unwrap();
        let b = nss_decompose(&f).unwrap();

        let mut original: Vec<u64> = f.data().iter().map(|v| v.to_bits()).collect();
        let mut collected: Vec<u64> = b
            .subsets()
            .iter()
            .flat_map(|s| s.data().iter().map(|v| v.to_bits()))
            .collect();
        original.sort_unstable();
        collected.sort_unstable();
        assert_eq!(original, collected);

        for s in b.subsets() {
            assert_eq!(s.height() * s.width(), 6 * 10 / 4);
        }
    }

    proptest! {
        #[test]
        fn round_trip_identity(c in 1usize..4, sh in 1usize..8, sw in 1usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FeatureMap::from_shape_fn(c, 2 * sh, 2 * sw, |_, _, _| rng.random::<f64>() * 10.0 - 5.0).unwrap();
            let back = nss_recompose(&nss_decompose(&f).unwrap()).unwrap();
            prop_assert_eq!(f.data(), back.data());
        }
    }
}

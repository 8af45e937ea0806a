use moveact_core::attention::TokenHeatmap;
use moveact_core::regions::{build_region_masks, dilate, edge_ring, resample_mask, BinaryMask, BoundingBox};
use moveact_core::config::RegionParams;
use proptest::prelude::*;

fn mask(h: usize, w: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(prop::bool::weighted(0.3), h * w).prop_map(move |v| BinaryMask::from_vec((h, w), v).unwrap())
}

fn unit_box() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..0.9, 0.0f64..0.9, 0.05f64..1.0, 0.05f64..1.0).prop_filter_map("degenerate", |(x, y, w, h)| {
        BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).ok()
    })
}

// Naive square-window dilation used as an oracle.
fn naive_dilate(m: &BinaryMask, k: usize) -> BinaryMask {
    let (h, w) = m.resolution();
    let r = (k / 2) as isize;
    BinaryMask::from_fn((h, w), |row, col| {
        (-r..=r).any(|dr| {
            (-r..=r).any(|dc| {
                let (y, x) = (row as isize + dr, col as isize + dc);
                y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.get(y as usize, x as usize)
            })
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dilation_matches_oracle_and_is_monotone(m in mask(8, 8), k in 1usize..4) {
        let k = 2 * k + 1;
        let d = dilate(&m, k).unwrap();
        prop_assert_eq!(&d, &naive_dilate(&m, k));
        prop_assert!(m.is_subset_of(&d));
        prop_assert!(d.is_subset_of(&dilate(&m, k + 2).unwrap()));
    }

    #[test]
    fn masks_partition_the_grid(values in proptest::collection::vec(0.0f64..1.0, 64), b in unit_box(), thr in 0.1f64..0.9) {
        let heat = TokenHeatmap::from_values(&values, (8, 8)).unwrap();
        prop_assume!(!heat.is_constant());
        let params = RegionParams { threshold: thr, dilate_kernel: 3 };
        let m = build_region_masks(&heat, &b, &params).unwrap();
        for i in 0..64 {
            let labels = [m.target.as_slice()[i], m.source.as_slice()[i], m.background.as_slice()[i]];
            prop_assert_eq!(labels.iter().filter(|x| **x).count(), 1);
        }
        prop_assert!(m.edge.is_subset_of(&m.background));
    }

    #[test]
    fn edge_ring_is_disjoint_from_its_source(m in mask(8, 8), k in 1usize..3) {
        let k = 2 * k + 1;
        let ring = edge_ring(&m, k).unwrap();
        prop_assert!(ring.is_disjoint(&m));
        prop_assert_eq!(ring.or(&m).unwrap(), naive_dilate(&m, k));
    }

    #[test]
    fn resample_round_trip(m in mask(8, 8), f in 2usize..5) {
        let up = resample_mask(&m, (8 * f, 8 * f)).unwrap();
        prop_assert_eq!(up.count(), m.count() * f * f);
        prop_assert_eq!(resample_mask(&up, (8, 8)).unwrap(), m);
    }
}

use partcoord::partition::{merge, split, validate_scheme, Layout, Motion, PartId, PartitionScheme, NUM_PARTS};
use partcoord::tape::Matrix;
use proptest::prelude::*;

fn motion_strategy() -> impl Strategy<Value = Motion> {
    let width = Layout::smpl22().width;
    (1usize..40).prop_flat_map(move |frames| {
        prop::collection::vec(-1e6f64..1e6, frames * width)
            .prop_map(move |data| Motion::new(Layout::smpl22(), Matrix::from_vec(frames, width, data)).unwrap())
    })
}

proptest! {
    #[test]
    fn merge_inverts_split(m in motion_strategy()) {
        let scheme = PartitionScheme::smpl22();
        let parts = split(&m, &scheme).unwrap();
        let back = merge(&parts, &scheme).unwrap();
        prop_assert_eq!(back.layout(), m.layout());
        let same = back.features().data().iter().zip(m.features().data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn split_keeps_frames_and_columns(m in motion_strategy()) {
        let scheme = PartitionScheme::smpl22();
        let parts = split(&m, &scheme).unwrap();
        prop_assert_eq!(parts.len(), NUM_PARTS);
        for (p, spec) in parts.iter().zip(&scheme.parts) {
            prop_assert_eq!(p.part, spec.part);
            prop_assert_eq!(p.frames(), m.frames());
            for (k, &c) in spec.columns.iter().enumerate() {
                for f in 0..m.frames() {
                    prop_assert_eq!(p.features.get(f, k), m.features().get(f, c));
                }
            }
        }
        // Column slots = D + one extra slot per additional owner of a shared column.
        let slots: usize = parts.iter().map(|p| p.features.cols()).sum();
        let extra: usize = scheme.shared.iter().map(|s| s.owners.len() - 1).sum();
        prop_assert_eq!(slots, m.width() + extra);
    }

    #[test]
    fn agreeing_owners_merge_to_their_value(v in -1e3f64..1e3) {
        let scheme = PartitionScheme::smpl22();
        let layout = Layout::smpl22();
        let m = Motion::new(layout.clone(), Matrix::filled(2, layout.width, v)).unwrap();
        let merged = merge(&split(&m, &scheme).unwrap(), &scheme).unwrap();
        prop_assert!(merged.features().data().iter().all(|&x| x == v));
    }
}

#[test]
fn joint_nine_has_three_owners() {
    let scheme = PartitionScheme::smpl22();
    assert!(validate_scheme(&scheme, 67).is_ok());
    for c in Layout::joint_columns(9) {
        let shared = scheme.shared.iter().find(|s| s.column == c).expect("joint 9 column is shared");
        let mut owners = shared.owners.clone();
        owners.sort();
        assert_eq!(owners, vec![PartId::RightArm, PartId::LeftArm, PartId::Backbone]);
    }
    assert_eq!(scheme.shared.len(), 3, "only joint 9 is shared by default");
}

#[test]
fn scheme_file_parses_and_infers_shared_columns() {
    let text = "R.Leg: 4,5,6\nL.Leg: 7,8\nR.Arm: 9,10\nL.Arm: 10,11\nBackbone: 12\nRoot: 0,1,2,3\n";
    let layout = Layout { id: "custom".into(), width: 13 };
    let scheme = PartitionScheme::parse(text, layout).unwrap();
    assert!(scheme.validate(13).is_ok());
    assert_eq!(scheme.shared.len(), 1);
    assert_eq!(scheme.shared[0].column, 10);
    assert_eq!(PartitionScheme::parse(&scheme.to_text(), scheme.layout.clone()).unwrap(), scheme);

    let gap = Layout { id: "custom".into(), width: 14 };
    let report = PartitionScheme::parse(text, gap).unwrap().validate(14);
    assert!(report.messages().iter().any(|m| m.contains("uncovered column 13")), "{:?}", report.messages());
}

#[test]
fn merge_averages_disagreeing_owners() {
    let scheme = PartitionScheme::smpl22();
    let layout = Layout::smpl22();
    let m = Motion::new(layout.clone(), Matrix::zeros(3, layout.width)).unwrap();
    let mut parts = split(&m, &scheme).unwrap();
    let col = Layout::joint_columns(9)[1];
    let values = [(PartId::RightArm, 0.25), (PartId::LeftArm, -4.0), (PartId::Backbone, 10.0)];
    for (owner, v) in values {
        let k = scheme.part(owner).unwrap().columns.iter().position(|&c| c == col).unwrap();
        let p = parts.iter_mut().find(|p| p.part == owner).unwrap();
        for f in 0..3 {
            p.features.set(f, k, v + f as f64);
        }
    }
    let merged = merge(&parts, &scheme).unwrap();
    for f in 0..3 {
        let want = values.iter().map(|(_, v)| v + f as f64).sum::<f64>() / 3.0;
        assert!((merged.features().get(f, col) - want).abs() < 1e-12);
    }
}

#[test]
fn split_rejects_a_foreign_layout() {
    let scheme = PartitionScheme::smpl22();
    let other = Motion::new(Layout::mmm21(), Matrix::zeros(1, Layout::mmm21().width)).unwrap();
    assert!(split(&other, &scheme).is_err());
}

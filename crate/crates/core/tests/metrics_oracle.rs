mod support;

use posetrack::domain::NUM_JOINTS;
use posetrack::metrics::{evaluate_ap, evaluate_mota, MatchConfig};
use support::oracle::{micro_sequences, mota_of, recount_ap, recount_mota};

#[test]
fn micro_sequences_match_brute_force_recount() {
    let cfg = MatchConfig::default();
    let mut nontrivial = 0;
    for (name, pred, gt) in micro_sequences() {
        let report = evaluate_mota(&pred, &gt, &cfg).unwrap();
        let oracle = recount_mota(&pred, &gt);
        for j in 0..NUM_JOINTS {
            let c = &report.joints[j];
            let o = &oracle[j];
            assert_eq!(
                (c.gt, c.false_negatives, c.false_positives, c.id_switches),
                (o.gt, o.fn_, o.fp, o.idsw),
                "{name}, joint {j}"
            );
            assert_eq!(report.joint_mota(j).unwrap(), mota_of(o), "{name}, joint {j}");
        }
        let ap = evaluate_ap(&pred, &gt, &cfg).unwrap();
        let ap_oracle = recount_ap(&pred, &gt);
        for j in 0..NUM_JOINTS {
            let (a, b) = (ap.per_joint[j].unwrap(), ap_oracle[j].unwrap());
            assert!((a - b).abs() < 1e-12, "{name}, joint {j}: {a} vs {b}");
        }
        if report.total_mota() < 1.0 {
            nontrivial += 1;
        }
    }
    assert!(nontrivial >= 7);
}

#[test]
fn expected_event_counts() {
    let seqs = micro_sequences();
    let cfg = MatchConfig::default();
    let idsw = |i: usize| evaluate_mota(&seqs[i].1, &seqs[i].2, &cfg).unwrap().joints[5].id_switches;
    assert_eq!(idsw(0), 0);
    assert_eq!(idsw(1), 2);
    assert_eq!(idsw(2), 2);
    let missed = evaluate_mota(&seqs[3].1, &seqs[3].2, &cfg).unwrap();
    assert_eq!(missed.joints[5].false_negatives, 1);
    // continuity beats the closer but identity-breaking pairing
    assert_eq!(idsw(9), 0);
}

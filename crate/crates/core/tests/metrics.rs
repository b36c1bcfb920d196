//! Hand-worked aggregation fixture.
//!
//! run 0: acc [.80 .84 .82 .79], TL [10 12 11 9]  -> best 1, sparsest matching 2
//! run 1: acc [.50 .50 .55 .40], TL [ 4  5  3 2]  -> best 2, sparsest matching 2
//! run 2: acc [.90 .85 .80 .70], TL [ 8  8  8 8]  -> no ticket
//!
//! BestSparse acc gains 5, 10 -> mean 7.5, std 2.5; TL gains 20, -25 -> -2.5, 22.5.
//! SparsestMatching acc gains 2.5, 10 -> 6.25, 3.75; TL gains 10, -25 -> -7.5, 17.5.
//! Dense acc% 80, 50, 90 -> 73.333.., std sqrt(866.67/3); SR 66.67; LTS 7.5 * 2/3 = 5.

use ticketforge::metrics::{accuracy_gain, summarize, write_summary_csv, Variant, SUMMARY_COLUMNS};
use ticketforge::ticket_search::{identify_winning_tickets, RunRecord, RunStatus, StageRecord};

fn run(run_id: u64, accs: [f64; 4], tls: [f64; 4]) -> RunRecord {
    let stages = (0..4)
        .map(|k| StageRecord { k, surviving_fraction: 0.84f64.powi(k as i32), val_acc: accs[k], test_acc: accs[k], trajectory_length: tls[k], epochs: 5 })
        .collect();
    RunRecord { run_id, seed: run_id, stages, mask_digests: vec![], status: RunStatus::Complete }
}

fn fixture() -> Vec<(RunRecord, ticketforge::ticket_search::WinningTickets)> {
    // Deliberately out of run_id order.
    [
        run(2, [0.90, 0.85, 0.80, 0.70], [8.0, 8.0, 8.0, 8.0]),
        run(0, [0.80, 0.84, 0.82, 0.79], [10.0, 12.0, 11.0, 9.0]),
        run(1, [0.50, 0.50, 0.55, 0.40], [4.0, 5.0, 3.0, 2.0]),
    ]
    .into_iter()
    .map(|r| {
        let t = identify_winning_tickets(&r).unwrap();
        (r, t)
    })
    .collect()
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn fixture_tickets() {
    let f = fixture();
    let t: Vec<_> = f.iter().map(|(_, t)| (t.best_sparse, t.sparsest_matching)).collect();
    assert_eq!(t, vec![(None, None), (Some(1), Some(2)), (Some(2), Some(2))]);
}

#[test]
fn fixture_aggregates_match_hand_arithmetic() {
    let s = summarize("toy", &fixture()).unwrap();
    assert_eq!((s.n_total, s.n_completed, s.n_success), (3, 3, 2));
    close(s.success_rate_pct, 200.0 / 3.0);
    close(s.lts_score, 5.0);

    let d = s.variant(Variant::Dense).unwrap();
    close(d.test_acc_pct.mean, 220.0 / 3.0);
    close(d.test_acc_pct.std, (2600.0f64 / 9.0).sqrt());
    close(d.trajectory_length.mean, 22.0 / 3.0);
    assert_eq!((d.acc_gain_pct.mean, d.acc_gain_pct.std, d.tl_gain_pct.mean, d.tl_gain_pct.std), (0.0, 0.0, 0.0, 0.0));

    let b = s.variant(Variant::BestSparse).unwrap();
    close(b.acc_gain_pct.mean, 7.5);
    close(b.acc_gain_pct.std, 2.5);
    close(b.tl_gain_pct.mean, -2.5);
    close(b.tl_gain_pct.std, 22.5);
    close(b.test_acc_pct.mean, 69.5);
    close(b.test_acc_pct.std, 14.5);
    close(b.trajectory_length.mean, 7.5);
    close(b.trajectory_length.std, 4.5);

    let m = s.variant(Variant::SparsestMatching).unwrap();
    close(m.acc_gain_pct.mean, 6.25);
    close(m.acc_gain_pct.std, 3.75);
    close(m.tl_gain_pct.mean, -7.5);
    close(m.tl_gain_pct.std, 17.5);
}

#[test]
fn gains_are_averaged_per_run_not_from_means() {
    let s = summarize("toy", &fixture()).unwrap();
    let per_run = s.variant(Variant::BestSparse).unwrap().acc_gain_pct.mean;
    // Gain of the means over the successful runs: (0.695 - 0.65) / 0.65.
    let of_means = accuracy_gain((0.84 + 0.55) / 2.0, (0.80 + 0.50) / 2.0).unwrap();
    close(per_run, 7.5);
    assert!((per_run - of_means).abs() > 0.5);
}

#[test]
fn summary_csv_has_table_columns() {
    let s = summarize("toy", &fixture()).unwrap();
    let mut buf = Vec::new();
    write_summary_csv(&[s], &mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, SUMMARY_COLUMNS);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[1][1], "BestSparse");
    assert_eq!(rows[1][8].parse::<f64>().unwrap(), 7.5);
    assert_eq!(&rows[0][12], "3");
    assert_eq!(&rows[2][12], "2");
}

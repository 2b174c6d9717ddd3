use proptest::prelude::*;

use kerr_dpt::dynamics::{staircase_metastable, Direction, SweepOptions, SweepProtocol};
use kerr_dpt::extraction::MeasuredBranchSet;
use kerr_dpt::geometry::{chi_solve, connections, ChiOptions, ConnectionOptions, ConnectionTable};
use kerr_dpt::io::ReadTable;
use kerr_dpt::spectral::{eig_full, steady_state};
use kerr_dpt::{Branch, Liouvillian, ModelParams, SweepParameter};

fn small_table() -> ConnectionTable {
    let p = ModelParams::reference(-6.0, 14);
    let grid: Vec<f64> = (0..21).map(|i| -8.0 + 0.25 * i as f64).collect();
    connections(&p, SweepParameter::Detuning, &grid, &ConnectionOptions::default()).unwrap()
}

#[test]
fn connection_table_survives_csv() {
    let table = small_table();
    let csv = table.to_table().to_csv_string();
    let back = ConnectionTable::from_read_table(SweepParameter::Detuning, &ReadTable::from_reader(csv.as_bytes()).unwrap())
        .unwrap();
    assert_eq!(back.form, table.form);
    let v = 1e-3;
    let (a, b) = (
        chi_solve(&table, v, &ChiOptions::default()).unwrap(),
        chi_solve(&back, v, &ChiOptions::default()).unwrap(),
    );
    assert!(((a.area - b.area) / a.area).abs() < 1e-9, "{} vs {}", a.area, b.area);
}

#[test]
fn sweep_csv_feeds_extraction_input() {
    let p = ModelParams::reference(-6.0, 12);
    let runs: Vec<(f64, ReadTable)> = [8usize, 16, 32]
        .iter()
        .map(|&n| {
            let prot = SweepProtocol::new(SweepParameter::Detuning, -8.0, -3.0, n, 10.0)
                .unwrap()
                .with_direction(Direction::Cycle);
            let res = staircase_metastable(&p, &prot, &SweepOptions::default()).unwrap();
            let csv = res.to_table().to_csv_string();
            (prot.velocity(), ReadTable::from_reader(csv.as_bytes()).unwrap())
        })
        .collect();
    // Nodes of the coarsest staircase: the resampling spline passes through them.
    let grid: Vec<f64> = (1..8).map(|k| -8.0 + 5.0 * k as f64 / 8.0).collect();
    let set = MeasuredBranchSet::from_sweep_tables(SweepParameter::Detuning, &runs, grid.clone()).unwrap();
    let r0 = &runs[0].1;
    let (r, n, branch) = (r0.numbers("delta").unwrap(), r0.numbers("n").unwrap(), r0.text("branch").unwrap());
    for (i, &g) in grid.iter().enumerate() {
        let k = (0..r.len())
            .find(|&k| (r[k] - g).abs() < 1e-9 && branch[k] == Branch::Forward.label())
            .unwrap();
        assert!((set.forward[0][i] - n[k]).abs() < 1e-9 * n[k].abs().max(1.0));
    }
    assert!(set.velocities_distinct());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn spectrum_is_mirror_symmetric_and_stable(
        delta in -12.0f64..0.0,
        u in -1.0f64..-0.1,
        f in 0.5f64..4.0,
    ) {
        let l = Liouvillian::build(&ModelParams::new(delta, u, f, 6)).unwrap();
        let spec = eig_full(&l).unwrap();
        let ev = spec.eigenvalues();
        let scale = l.norm();
        prop_assert!(ev[0].norm() < 1e-9 * scale);
        for lam in &ev {
            prop_assert!(lam.im <= 1e-9 * scale, "growing mode {lam}");
            let mirror = -lam.conj();
            let nearest = ev.iter().map(|mu| (mu - mirror).norm()).fold(f64::INFINITY, f64::min);
            prop_assert!(nearest < 1e-8 * scale, "no mirror partner for {lam}");
        }
        let rho = steady_state(&l).unwrap();
        prop_assert!((rho.trace().re - 1.0).abs() < 1e-10);
        prop_assert!(rho.hermiticity_error() < 1e-10);
        prop_assert!(rho.hermitian_eigenvalues().iter().all(|&x| x > -1e-10));
    }
}

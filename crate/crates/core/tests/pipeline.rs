use std::fs::File;
use std::io::BufReader;

use dpem::accountant::{Method, Scenario};
use dpem::data::RowMatrix;
use dpem::experiment::{run_sweep, KMeansVariant, ModelSpec, SweepConfig};
use dpem::io::{
    load_csv, read_jsonl, save_csv, summarize, synth_mog, write_jsonl, write_summary_csv,
    ExperimentResult,
};
use dpem::mog::Estimator;
use dpem::par::Exec;
use dpem::Error;

fn sweep(model: ModelSpec) -> SweepConfig {
    SweepConfig {
        model,
        eps_list: vec![0.5, 4.0],
        delta: 1e-4,
        delta_i: 1e-6,
        methods: Method::ALL.to_vec(),
        folds: 2,
        seeds: 2,
        master_seed: 3,
        lambda_max: 512,
    }
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let m = RowMatrix::from_rows(&[[0.1, -1e-300, 3.0], [f64::MIN_POSITIVE, 1.0 / 3.0, -7.25e12]]).unwrap();
    save_csv(&path, &m).unwrap();
    assert_eq!(load_csv(&path, false).unwrap(), m);
}

#[test]
fn ragged_csv_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "1,2\n3,4\n5\n").unwrap();
    match load_csv(&path, false) {
        Err(Error::RaggedRow { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected ragged-row error, got {other:?}"),
    }
}

#[test]
fn sweep_results_persist_and_pass_audit() {
    let data = synth_mog(800, 3, 2, 4.0, 9).unwrap().data;
    let cfg = sweep(ModelSpec::Mog {
        k: 2,
        iters: 4,
        scenario: Scenario::Llg,
        estimator: Estimator::Map,
    });
    let out = run_sweep(&data, &cfg, Exec::default()).unwrap();
    assert_eq!(out.results.len(), 4 * 2 * 2 * 2);
    for r in &out.results {
        assert!(r.audit_epsilon <= r.epsilon * (1.0 + 1e-9), "{r:?}");
        assert!(r.audit_delta <= r.delta * (1.0 + 1e-9), "{r:?}");
        assert_eq!(r.trace.mechanisms, 4 * 5);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.jsonl");
    write_jsonl(File::create(&path).unwrap(), &out.results).unwrap();
    let back: Vec<ExperimentResult> = read_jsonl(BufReader::new(File::open(&path).unwrap())).unwrap();
    assert_eq!(back, out.results);

    let rows = summarize(&out.results, &out.baseline);
    assert_eq!(rows.len(), 4 * 2 + 1);
    let last = rows.last().unwrap();
    assert_eq!(last.method, "nonprivate");
    assert_eq!(last.count, 4);
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_summary_csv(&mut a, &rows).unwrap();
    let again = run_sweep(&data, &cfg, Exec::Sequential).unwrap();
    write_summary_csv(&mut b, &summarize(&again.results, &again.baseline)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn kmeans_and_fa_sweeps_audit() {
    let data = synth_mog(600, 3, 3, 4.0, 10).unwrap().data;
    for model in [
        ModelSpec::Fa { q: 1, iters: 100 },
        ModelSpec::KMeans {
            k: 3,
            iters: 5,
            variants: KMeansVariant::ALL.to_vec(),
        },
    ] {
        let out = run_sweep(&data, &sweep(model), Exec::default()).unwrap();
        assert!(!out.results.is_empty());
        assert!(out
            .results
            .iter()
            .all(|r| r.audit_epsilon <= r.epsilon * (1.0 + 1e-9) && r.metric.is_finite()));
    }
}

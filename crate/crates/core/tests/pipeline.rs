mod common;

use std::path::Path;

use common::{random_w, Setup};
use hkm::pipeline::{accuracy_sweep, inspector_p1, inspector_p2, run_inspector, sweep_csv, P1Artifacts, P2Artifacts, P2Config};
use hkm::reference::ErrorMode;
use hkm::Error;

fn file_bytes(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect()
}

const P1_FILES: [&str; 6] = ["points.bin", "ctree.bin", "htree.bin", "sampling.bin", "blockset.bin", "p1.json"];
const P2_FILES: [&str; 4] = ["hmat.cds", "coarsenset.bin", "plan.json", "p2.json"];

#[test]
fn phases_are_idempotent_on_disk() {
    let setup = Setup { n: 600, ..Default::default() };
    let points = hkm::points::synth_points(setup.shape, setup.n, setup.seed).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        run_inspector(&points, &setup.p1_config(), &setup.p2_config(), dir, false).unwrap();
    }
    assert_eq!(file_bytes(a.path(), &P1_FILES), file_bytes(b.path(), &P1_FILES));
    assert_eq!(file_bytes(a.path(), &P2_FILES), file_bytes(b.path(), &P2_FILES));
}

#[test]
fn artifacts_load_back_identically() {
    let setup = Setup { n: 500, ..Default::default() };
    let inst = setup.build();
    let dir = tempfile::tempdir().unwrap();
    inst.p1.save(dir.path()).unwrap();
    inst.p2.save(dir.path()).unwrap();
    assert_eq!(P1Artifacts::load(dir.path()).unwrap(), inst.p1);
    assert_eq!(P2Artifacts::load(dir.path()).unwrap(), inst.p2);
}

#[test]
fn second_phase_reuses_first_without_touching_it() {
    let setup = Setup { n: 600, ..Default::default() };
    let points = hkm::points::synth_points(setup.shape, setup.n, setup.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = run_inspector(&points, &setup.p1_config(), &setup.p2_config(), dir.path(), true).unwrap();
    assert!(!first.reused_p1);
    let mtimes = |d: &Path| -> Vec<_> { P1_FILES.iter().map(|n| std::fs::metadata(d.join(n)).unwrap().modified().unwrap()).collect() };
    let before = mtimes(dir.path());
    std::thread::sleep(std::time::Duration::from_millis(20));
    let cfg = P2Config { bacc: 1e-3, ..setup.p2_config() };
    let second = run_inspector(&points, &setup.p1_config(), &cfg, dir.path(), true).unwrap();
    assert!(second.reused_p1);
    assert_eq!(mtimes(dir.path()), before);

    // Same result as the from-scratch path.
    let scratch = inspector_p2(&inspector_p1(&points, &setup.p1_config()).unwrap(), &cfg).unwrap();
    assert_eq!(second.p2, scratch);
    let w = random_w(600, 3, 1);
    let y_reuse = P2Artifacts::load(dir.path()).unwrap().executor().unwrap().evaluate(&w).unwrap();
    assert_eq!(y_reuse, scratch.executor().unwrap().evaluate(&w).unwrap());
}

#[test]
fn stale_or_corrupt_artifacts_are_refused() {
    let setup = Setup { n: 400, ..Default::default() };
    let inst = setup.build();
    let dir = tempfile::tempdir().unwrap();
    inst.p1.save(dir.path()).unwrap();
    inst.p2.save(dir.path()).unwrap();

    // Flip one byte of a phase-one file.
    let path = dir.path().join("sampling.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(P1Artifacts::load(dir.path()), Err(Error::Consistency(_))));

    // Phase one rebuilt from other points: phase two no longer matches.
    let other = Setup { seed: 99, ..setup }.build();
    other.p1.save(dir.path()).unwrap();
    let err = P2Artifacts::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Consistency(_)), "{err}");
    assert!(err.to_string().contains("rerun"));

    // Corrupt CDS.
    inst.p1.save(dir.path()).unwrap();
    let path = dir.path().join("hmat.cds");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[20] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(P2Artifacts::load(dir.path()), Err(Error::Consistency(_))));
}

#[test]
fn unsupported_manifest_version_is_refused() {
    let inst = Setup { n: 300, ..Default::default() }.build();
    let dir = tempfile::tempdir().unwrap();
    inst.p1.save(dir.path()).unwrap();
    let path = dir.path().join("p1.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(P1Artifacts::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn sweep_reports_every_accuracy() {
    let setup = Setup { n: 800, ..Default::default() };
    let inst = setup.build();
    let w = random_w(800, 2, 3);
    let baccs = [1e-1, 1e-3, 1e-5];
    let rows = accuracy_sweep(&inst.p1, &setup.p2_config(), &baccs, &w, ErrorMode::Dense).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].error < rows[0].error);
    let csv = sweep_csv(&rows);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("bacc,error,"));
}

#[test]
fn configs_with_inexact_decimals_reload() {
    // 0.1 + 0.2 has no short decimal form; the manifest must still round-trip.
    let setup = Setup { n: 300, mode: hkm::AdmissibilityMode::Tau(0.1 + 0.2), bacc: 0.1 + 0.2, ..Default::default() };
    let inst = setup.build();
    let dir = tempfile::tempdir().unwrap();
    inst.p1.save(dir.path()).unwrap();
    inst.p2.save(dir.path()).unwrap();
    assert_eq!(P1Artifacts::load(dir.path()).unwrap(), inst.p1);
    assert_eq!(P2Artifacts::load(dir.path()).unwrap(), inst.p2);
}

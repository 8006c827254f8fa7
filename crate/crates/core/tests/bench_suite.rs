use std::path::{Path, PathBuf};
use std::sync::Arc;

use gridscribe_core::corpus::CorpusManifest;
use gridscribe_core::metrics::{
    load_tasks, run_benchmark, write_reports, BenchMatrix, BenchOptions, BenchSummary, Complexity, FileSessionFactory,
    SUMMARY_FILE, TABLE_FILE,
};
use gridscribe_core::{HashingEmbedder, KnowledgeStores, RunStatus};

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn stores() -> KnowledgeStores {
    let corpus = CorpusManifest::load(data().join("corpus/manifest.json"))
        .unwrap()
        .load_corpus()
        .unwrap();
    KnowledgeStores::from_corpus(&corpus, Arc::new(HashingEmbedder::default())).unwrap()
}

fn run(parallel: usize) -> Vec<BenchSummary> {
    let tasks = load_tasks(data().join("tasks.jsonl")).unwrap();
    let matrix = BenchMatrix::load(data().join("bench/matrix.json")).unwrap();
    let factory = FileSessionFactory {
        settings: Default::default(),
    };
    run_benchmark(&tasks, &matrix, &stores(), &factory, BenchOptions { parallel })
}

#[test]
fn task_suite_shape() {
    let tasks = load_tasks(data().join("tasks.jsonl")).unwrap();
    assert_eq!(tasks.len(), 10);
    assert_eq!(tasks.iter().filter(|t| t.complexity == Complexity::Easy).count(), 5);
    assert!(tasks[0].request.contains("Increase the active load at bus 2 by 15%"));
    let authored: Vec<&str> = tasks
        .iter()
        .filter(|t| t.origin.as_deref() == Some("authored"))
        .map(|t| t.task_id.as_str())
        .collect();
    assert_eq!(authored, ["easy_4", "easy_5", "hard_4", "hard_5"]);
}

#[test]
fn matrix_runs_clean_and_is_deterministic() {
    let serial = run(1);
    let parallel = run(4);
    assert_eq!(serial.len(), 7);
    for (a, b) in serial.iter().zip(&parallel) {
        assert!(a.error.is_none(), "{}: {:?}", a.label, a.error);
        assert_eq!(a.records, b.records);
        assert_eq!(a.gca, b.gca);
        assert_eq!(a.k, 10);
    }
    let full = &serial[0];
    assert_eq!(full.label, "Full Model");
    assert!(full.records.iter().all(|r| r.status == RunStatus::Success));
    let single = serial.iter().find(|s| s.label == "Single Pass").unwrap();
    assert!(single.records.iter().all(|r| r.n == 1));

    let dir = tempfile::tempdir().unwrap();
    write_reports(dir.path(), &serial).unwrap();
    let back: Vec<BenchSummary> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(back.len(), serial.len());
    assert_eq!(back[2].records, serial[2].records);
    let table = std::fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
    assert!(table.contains("Execution Only"));
}

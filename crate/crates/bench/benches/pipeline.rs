use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use gridscribe_bench::{bundled_corpus, SAMPLE_SCRIPT};
use gridscribe_core::agent::{run_agent, AgentConfig, AgentDeps};
use gridscribe_core::corpus::{chunk_sliding, SourceDocument, SourceKind};
use gridscribe_core::executor::{ExecStatus, MockExecBackend, MockScenario};
use gridscribe_core::prompt::bundled_fewshots;
use gridscribe_core::{
    csgf, gca, precheck, ConventionCatalog, Embedder, HashingEmbedder, KnowledgeStores, MockBackend, MockScript,
};

fn chunking(c: &mut Criterion) {
    let text = "MATPOWER solves power flow and optimal power flow problems. ".repeat(2000);
    let doc = SourceDocument::new("bench", SourceKind::RawText, text);
    c.bench_function("chunk_sliding_120k", |b| {
        b.iter(|| chunk_sliding(black_box(&doc), 1000, 800).unwrap())
    });
}

fn index_search(c: &mut Criterion) {
    let stores = KnowledgeStores::from_corpus(&bundled_corpus(), Arc::new(HashingEmbedder::default())).unwrap();
    let index = stores.enhanced.expect("enhanced index");
    let q = HashingEmbedder::default()
        .embed("set the power flow tolerance with mpoption")
        .unwrap();
    c.bench_function("enhanced_search_top4", |b| {
        b.iter(|| index.search(black_box(&q), 4).unwrap())
    });
    c.bench_function("embed_query", |b| {
        let e = HashingEmbedder::default();
        b.iter(|| {
            e.embed(black_box("run a DC OPF on case24_ieee_rts and list the LMPs"))
                .unwrap()
        })
    });
}

fn prechecking(c: &mut Criterion) {
    let catalog = ConventionCatalog::bundled();
    c.bench_function("precheck_sample", |b| {
        b.iter(|| precheck(black_box(SAMPLE_SCRIPT), catalog))
    });
}

fn scoring(c: &mut Criterion) {
    let scores: Vec<f64> = (0..1000).map(|i| [1.0, 0.8, 0.64, 0.48, 0.0][i % 5]).collect();
    c.bench_function("csgf", |b| b.iter(|| csgf(black_box(0.8), black_box(3), 5).unwrap()));
    c.bench_function("gca_1000", |b| b.iter(|| gca(black_box(&scores)).unwrap()));
}

fn agent_loop(c: &mut Criterion) {
    let stores = KnowledgeStores::from_corpus(&bundled_corpus(), Arc::new(HashingEmbedder::default())).unwrap();
    let code = "```matlab\nmpc = loadcase('case9');\nresults = runpf(mpc);\n```";
    c.bench_function("agent_mock_recovery", |b| {
        b.iter(|| {
            let mut script = MockScript::from_texts([code, code]);
            script.push_tagged("VALIDATE-REQUEST", r#"{"severity":"none","issues":[]}"#);
            let llm = MockBackend::new(script);
            let exec = MockExecBackend::new(MockScenario::from_statuses(&[
                ExecStatus::RuntimeError,
                ExecStatus::Success,
            ]));
            let deps = AgentDeps {
                llm: &llm,
                validator_llm: None,
                stores: &stores,
                executor: &exec,
                catalog: ConventionCatalog::bundled(),
                fewshots: bundled_fewshots(),
            };
            let mut config = AgentConfig::full_model();
            config.planner_enabled = false;
            run_agent("Run an AC power flow on case9", &config, &deps).unwrap()
        })
    });
}

criterion_group!(benches, chunking, index_search, prechecking, scoring, agent_loop);
criterion_main!(benches);

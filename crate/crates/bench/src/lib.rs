//! Fixtures shared by the criterion benchmarks.

use std::path::{Path, PathBuf};

use gridscribe_core::{Corpus, CorpusManifest};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn bundled_corpus() -> Corpus {
    CorpusManifest::load(data_dir().join("corpus/manifest.json"))
        .and_then(|m| m.load_corpus())
        .expect("bundled corpus")
}

/// A script that exercises both pre-check passes.
pub const SAMPLE_SCRIPT: &str = "mpc = loadcase('case118');
opt = mpoption('verbos', 0, 'pf.tol', 1e-10, 'out.all', 0);
mpc.bus(2, PD) = mpc.bus(2, PD) * 1.15; % scale PD
results = runpf(mpc, opt);
[vmin, i] = min(results.bus(:, VM));
fprintf('min Vm %.4f at bus %d\\n', vmin, results.bus(i, BUS_I));
";

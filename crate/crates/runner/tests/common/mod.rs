#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rctcast_core::dataset::CorpusEntry;
use rctcast_core::Estimate;

const INTERVENTIONS: [&str; 8] = [
    "conditional cash transfers to mothers",
    "school feeding programme in rural primary schools",
    "deworming tablets for schoolchildren",
    "microfinance loans for women entrepreneurs",
    "bed net distribution to households",
    "teacher coaching and structured pedagogy",
    "community health worker home visits",
    "unconditional grants for young adults",
];

const OUTCOMES: [&str; 8] = [
    "school attendance rate",
    "child height for age",
    "household consumption",
    "malaria prevalence among children",
    "reading test scores",
    "business profits",
    "vaccination coverage",
    "employment in the formal sector",
];

/// Deterministic corpus: roughly 70% health, the rest education, one or two
/// estimates per RCT, every estimate with a CI.
pub fn corpus(n: usize, seed: u64) -> Vec<Estimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut rct = 0;
    while out.len() < n {
        rct += 1;
        let sector = if rng.gen_bool(0.7) { "health" } else { "education" };
        let per_rct = if rng.gen_bool(0.5) { 1 } else { 2 };
        for _ in 0..per_rct {
            if out.len() == n {
                break;
            }
            let i = rng.gen_range(0..INTERVENTIONS.len());
            let o = rng.gen_range(0..OUTCOMES.len());
            let g: f64 = (rng.gen_range(-0.6..0.9f64) * 1e4).round() / 1e4;
            let lo: f64 = (rng.gen_range(0.02..0.4f64) * 1e4).round() / 1e4;
            let hi: f64 = (rng.gen_range(0.02..0.4f64) * 1e4).round() / 1e4;
            out.push(Estimate {
                estimate_id: format!("e{:03}", out.len() + 1),
                rct_id: format!("r{rct:03}"),
                intervention_desc: format!("A {} delivered by local partners", INTERVENTIONS[i]),
                outcome_desc: format!("Change in {} measured at endline", OUTCOMES[o]),
                effect_size: g,
                ci_lower: Some(g - lo),
                ci_upper: Some(g + hi),
                sector: Some(sector.into()),
                intervention_name: Some(INTERVENTIONS[i].into()),
                outcome_name: Some(OUTCOMES[o].into()),
                sample_size: Some(rng.gen_range(100..3000)),
            });
        }
    }
    out
}

pub fn write_corpus(path: &Path, estimates: &[Estimate]) {
    let entries: Vec<CorpusEntry> = estimates.iter().cloned().map(CorpusEntry::from).collect();
    rctcast_core::jsonl::write_jsonl(path, &entries).unwrap();
}

/// Writes `run.toml` next to `corpus.jsonl` in `dir` and returns its path.
/// `body` holds everything after the common header.
pub fn write_config(dir: &Path, name: &str, base_url: &str, body: &str) -> PathBuf {
    let text = format!(
        "name = \"{name}\"\ncorpus = \"corpus.jsonl\"\noutput_dir = \"runs/{name}\"\n{body}\n\n[llm]\nbase_url = \"{base_url}\"\ndefault_model = \"mock-model\"\nmax_in_flight = 4\n"
    );
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

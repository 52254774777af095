//! Prints the five-mode ablation table on the default synthetic corpus for a
//! range of seeds: `cargo run --release --example ablation -- 0 9`.

use concept_curation::pipeline::{run_ablation, AblationMode, CurationInputs};
use concept_curation::synth::{synth_corpus, SynthSpec};
use concept_curation::PipelineConfig;

fn main() -> concept_curation::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (first, last) = match args.as_slice() {
        [a, b] => (*a, *b),
        [a] => (*a, *a),
        _ => (0, 0),
    };
    for seed in first..=last {
        let synth = synth_corpus(&SynthSpec {
            seed,
            ..SynthSpec::default()
        })?;
        let inputs = CurationInputs::from_synth(&synth)?;
        let config = PipelineConfig {
            seed,
            threads: 8,
            ..PipelineConfig::default()
        };
        let table = run_ablation(&inputs, &config, &AblationMode::ALL, &synth.truth)?;
        println!("seed {seed}\n{table}");
    }
    Ok(())
}

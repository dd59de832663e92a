// Every example in examples/ runs to completion.

macro_rules! example {
    ($module:ident, $test:ident, $file:literal) => {
        mod $module {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", $file));
        }

        #[test]
        fn $test() {
            $module::run_example().expect(concat!($file, " should run"));
        }
    };
}

example!(caption_six_species, caption_six_species_runs, "caption_six_species.rs");
example!(column_selection, column_selection_runs, "column_selection.rs");
example!(shard_roundtrip, shard_roundtrip_runs, "shard_roundtrip.rs");
example!(synth_dataset, synth_dataset_runs, "synth_dataset.rs");
example!(grad_check, grad_check_runs, "grad_check.rs");
example!(lit_tune, lit_tune_runs, "lit_tune.rs");
example!(zero_shot, zero_shot_runs, "zero_shot.rs");
example!(warmup_ablation, warmup_ablation_runs, "warmup_ablation.rs");
example!(full_pipeline, full_pipeline_runs, "full_pipeline.rs");

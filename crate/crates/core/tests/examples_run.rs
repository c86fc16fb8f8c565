//! Every example must run to completion.

macro_rules! example {
    ($name:ident) => {
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }

        #[test]
        fn $name() {
            $name::run_example().expect(stringify!($name));
        }
    };
}

example!(validate_kg);
example!(combine_images);
example!(unified_prompt);
example!(step2_dialogue);
example!(ground_answers);
example!(finetune_corpus);
example!(mock_eval_run);
example!(compare_ablation);
example!(remote_backend);

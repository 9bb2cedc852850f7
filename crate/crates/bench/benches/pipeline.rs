use criterion::{black_box, criterion_group, criterion_main, Criterion};

use commander_core::backends::{cache_key, BackendSpec, DecodingParams, ImagePart, MockRule, ModelRequest, UserPart};
use commander_core::config::RunConfig;
use commander_core::datasets::{DatasetManifest, Split};
use commander_core::dispatch::Clue;
use commander_core::evaluation::{metrics, ConfusionCounts};
use commander_core::evidence::{assemble_chain, parse_label, render_final_prompt};
use commander_core::experiment::run_experiment;
use commander_core::registry::SubTaskKind;
use commander_core::sample::{ImageRef, Label, Sample};

const VERDICT: &str = "From the image, the parking lot is almost empty, which contrasts sharply with the \
statement. This exaggerated description does not match the reality, making it ironic. \
Therefore, the sentence is sarcastic.";

fn bench_parse(c: &mut Criterion) {
    c.bench_function("parse_label", |b| b.iter(|| parse_label(black_box(VERDICT))));
}

fn bench_cache_key(c: &mut Criterion) {
    let req = ModelRequest {
        system_text: "You are the commander.".into(),
        user_parts: vec![
            UserPart::Text("the pa welcome center is hopping today .".into()),
            UserPart::Image(ImagePart {
                media_type: "image/jpeg".into(),
                data: vec![7u8; 64 * 1024],
            }),
        ],
        decoding: DecodingParams::default(),
    };
    c.bench_function("cache_key_64k_image", |b| {
        b.iter(|| cache_key("commander", "m", black_box(&req)))
    });
}

fn bench_final_prompt(c: &mut Criterion) {
    let sample = Sample::text_only("t2", "the pa welcome center is hopping today .");
    let clues: Vec<Clue> = SubTaskKind::ALL
        .iter()
        .filter(|k| !k.is_image())
        .map(|k| Clue::ok(*k, "a short clue about the text"))
        .collect();
    let chain = assemble_chain(&sample, clues).unwrap();
    c.bench_function("render_final_prompt", |b| {
        b.iter(|| render_final_prompt(black_box(&chain), false, DecodingParams::default()))
    });
}

fn bench_metrics(c: &mut Criterion) {
    let counts = ConfusionCounts {
        tp: 1234,
        fp: 321,
        fn_: 222,
        tn: 999,
    };
    c.bench_function("metrics", |b| b.iter(|| metrics(black_box(&counts))));
}

fn bench_mock_pipeline(c: &mut Criterion) {
    let mock = |id: &str, reply: &str| BackendSpec::mock(id, vec![MockRule::reply(".*", reply)]);
    let mut config = RunConfig::new(
        "cmd",
        "clf",
        vec![
            mock("cmd", r#"{"selected":["Keyword","Rhetoric"],"rationale":"text cues"}"#),
            mock("clf", "The sentence is sarcastic."),
            mock("spec", "clue"),
        ],
    );
    config.subtask_backend = Some("spec".into());
    config.workers = 4;
    let samples = (0..20)
        .map(|i| {
            let s = Sample::text_only(format!("s{i:02}"), format!("sample text {i}")).with_gold(Label::Sarcastic);
            if i % 2 == 0 {
                s.with_image(ImageRef::Inline {
                    media_type: "image/png".into(),
                    data: vec![i as u8; 128],
                })
            } else {
                s
            }
        })
        .collect();
    let manifest = DatasetManifest {
        name: "bench".into(),
        split: Split::Test,
        samples,
        image_root: None,
    };
    c.bench_function("mock_pipeline_20", |b| {
        b.iter(|| run_experiment(&manifest, &config).unwrap())
    });
}

criterion_group!(
    benches,
    bench_parse,
    bench_cache_key,
    bench_final_prompt,
    bench_metrics,
    bench_mock_pipeline
);
criterion_main!(benches);

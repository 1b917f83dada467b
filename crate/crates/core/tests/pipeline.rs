use ovprobe::config::PipelineConfig;
use ovprobe::datastore::{generate_synthetic, read_head_checkpoint, ClassKind, SynthConfig};
use ovprobe::inference::read_detections_jsonl;
use ovprobe::pipeline::{self, OutputLayout};
use ovprobe::probe::sigmoid_scores;
use ovprobe::retrieval::PseudoLabelSet;

fn small_config(out: &std::path::Path) -> PipelineConfig {
    PipelineConfig {
        out: out.to_path_buf(),
        synth: SynthConfig {
            train_images: 60,
            test_images: 30,
            ..SynthConfig::default()
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn artifacts_reload_to_the_in_memory_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let layout = OutputLayout::new(dir.path());
    let outcome = pipeline::run_all(&cfg, &layout).unwrap();

    assert_eq!(read_head_checkpoint(&layout.path(pipeline::UNIFIED_HEAD_FILE)).unwrap(), outcome.unified);
    assert_eq!(read_head_checkpoint(&layout.path(pipeline::BASE_HEAD_FILE)).unwrap(), outcome.base);
    assert_eq!(PseudoLabelSet::read_json(&layout.path(pipeline::PSEUDO_LABELS_FILE)).unwrap(), outcome.pseudo);

    let dets = read_detections_jsonl(&layout.path(pipeline::DETECTIONS_FILE)).unwrap();
    let mut expected = outcome.detections.clone();
    expected.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(b.score.total_cmp(&a.score)));
    assert_eq!(dets, expected);
}

#[test]
fn unified_head_keeps_base_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let dataset = generate_synthetic(&cfg.synth, cfg.synth_seed()).unwrap();
    let outcome = pipeline::run_stages(&dataset, &cfg).unwrap();
    let n_base = dataset.class_ids(ClassKind::Base).len();
    assert_eq!(outcome.unified.head.class_ids().len(), dataset.classes.len());
    for p in dataset.proposals.iter().take(300) {
        let unified = sigmoid_scores(&outcome.unified.head, &p.f_cls).unwrap();
        let base = sigmoid_scores(&outcome.base.head, &p.f_cls).unwrap();
        assert_eq!(&unified[..n_base], &base[..]);
    }
}

#[test]
fn pseudo_labels_have_k_per_novel_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let dataset = generate_synthetic(&cfg.synth, cfg.synth_seed()).unwrap();
    let pseudo = pipeline::retrieve(&dataset, &cfg, 25).unwrap();
    for c in dataset.class_ids(ClassKind::Novel) {
        let entries: Vec<_> = pseudo.for_class(c).collect();
        assert_eq!(entries.len(), 25);
        assert!(entries.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        assert!(entries.iter().all(|e| dataset.proposals[e.proposal_index].objectness > cfg.tau as f32));
    }
}

use metaprefix::checkpoint::{load_base, load_prefix, save_base, save_prefix, BaseCheckpoint, PrefixCheckpoint};
use metaprefix::corpus::CodeSummaryPair;
use metaprefix::evalbench::summarize;
use metaprefix::model::{Decoding, ModelConfig, PrefixParams, Seq2Seq};
use metaprefix::seed::rng;
use metaprefix::synth::{style_projects, STYLES};
use metaprefix::textcodec::{Codec, Side, Vocabulary};
use metaprefix::train::{finetune_prefix, pretrain, RunLog, TrainConfig};

fn setup() -> (Vec<CodeSummaryPair>, Codec, ModelConfig) {
    let pairs: Vec<CodeSummaryPair> = style_projects(&STYLES[..2], 12, 5).unwrap().into_iter().flat_map(|p| p.pairs).collect();
    let codec = Codec {
        code_vocab: Vocabulary::build(&pairs, Side::Code, 60).unwrap(),
        summary_vocab: Vocabulary::build(&pairs, Side::Summary, 40).unwrap(),
        max_code_len: 20,
        max_sum_len: 8,
    };
    let cfg = ModelConfig {
        max_code_len: 20,
        max_sum_len: 8,
        code_vocab_size: codec.code_vocab.len(),
        summary_vocab_size: codec.summary_vocab.len(),
        ..ModelConfig::tiny()
    };
    (pairs, codec, cfg)
}

#[test]
fn trained_checkpoints_reload_to_identical_generations() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, codec, cfg) = setup();
    let encoded = codec.encode_pairs(&pairs);
    let tcfg = TrainConfig { learning_rate: 1e-2, max_epochs: 3, patience: 2, batch_size: 4, seed: 9, ..Default::default() };
    let theta = pretrain(&cfg, &encoded, &tcfg, &mut RunLog::default()).unwrap().params;
    let model = Seq2Seq::new(cfg.clone()).unwrap();
    let code: Vec<Vec<String>> = pairs.iter().map(|p| p.code_tokens.clone()).collect();

    let base_path = dir.path().join("base.ckpt");
    let trainable = theta.names().cloned().collect();
    save_base(&base_path, &BaseCheckpoint { config: cfg.clone(), params: theta.clone(), trainable }).unwrap();
    let base = load_base(&base_path).unwrap();
    assert_eq!(base.params, theta);
    assert_eq!(
        summarize(&model, &base.params, None, &codec, &code, Decoding::Greedy).unwrap(),
        summarize(&model, &theta, None, &codec, &code, Decoding::Greedy).unwrap()
    );

    let mut phi = PrefixParams::new(&cfg, &mut rng(10));
    phi.register_project("alpha", &mut rng(11)).unwrap();
    let ft = TrainConfig { max_epochs: 2, patience: 1, val_fraction: 0.0, ..tcfg };
    let out = finetune_prefix(&model, &theta, Some(&phi), "alpha", &encoded[..6], &ft, &mut RunLog::default()).unwrap();
    let mut ckpt = PrefixCheckpoint::new(out.prefix.clone().unwrap());
    ckpt.output_layers.insert("alpha".into(), out.output_layer().unwrap());
    let expected = summarize(&model, &out.theta, Some(&ckpt.prefix.view("alpha").unwrap()), &codec, &code, Decoding::Beam(2)).unwrap();

    let prefix_path = dir.path().join("alpha.ckpt");
    ckpt.prefix.drop_mlp().unwrap();
    save_prefix(&prefix_path, &ckpt).unwrap();
    let loaded = load_prefix(&prefix_path).unwrap();
    let backbone = loaded.backbone_for(&base.params, "alpha");
    assert_eq!(backbone, out.theta);
    let got = summarize(&model, &backbone, Some(&loaded.prefix.view("alpha").unwrap()), &codec, &code, Decoding::Beam(2)).unwrap();
    assert_eq!(got, expected);
}

#[test]
fn vocab_files_keep_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, codec, _) = setup();
    let path = dir.path().join("summary.vocab");
    codec.summary_vocab.save(&path).unwrap();
    let back = Vocabulary::load(&path).unwrap();
    assert_eq!(back.len(), codec.summary_vocab.len());
    for w in pairs.iter().flat_map(|p| &p.summary_tokens) {
        assert_eq!(back.id(w), codec.summary_vocab.id(w));
    }
    let first = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(back.id(&first), 4);
}

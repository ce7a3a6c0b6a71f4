use adm_core::pipeline::{
    decode_checkpoint, encode_checkpoint, expand_novel_branch, load_checkpoint, make_synthetic_stream, pretrain_base,
    save_checkpoint, StreamSpec,
};
use adm_core::{ExperimentConfig, MergeMode, Model};

fn trained() -> (ExperimentConfig, Model) {
    let mut cfg = ExperimentConfig::default();
    cfg.samples_per_class = 20;
    cfg.pretrain_epochs = 2;
    let stream = make_synthetic_stream(&StreamSpec::from_config(&cfg)).unwrap();
    let model = pretrain_base(&cfg, &stream.base_train).unwrap().model;
    (cfg, model)
}

#[test]
fn round_trip_is_exact_and_resave_is_byte_identical() {
    let (cfg, model) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.admc");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path, &cfg.arch).unwrap();
    assert_eq!(loaded, model);
    let again = dir.path().join("again.admc");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn expanded_models_round_trip() {
    let (cfg, model) = trained();
    for mode in [MergeMode::Imm, MergeMode::Aff, MergeMode::Amm] {
        let mut m = model.clone();
        expand_novel_branch(&mut m, 5, mode, &cfg).unwrap();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&m), &cfg.arch).unwrap(), m);
    }
}

#[test]
fn header_layout() {
    let (_, model) = trained();
    let bytes = encode_checkpoint(&model);
    assert_eq!(&bytes[..4], b"ADMC");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), adm_core::pipeline::FORMAT_VERSION);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), model.arch.hash());
}

#[test]
fn corrupt_files_are_rejected() {
    let (cfg, model) = trained();
    let bytes = encode_checkpoint(&model);
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut], &cfg.arch).is_err(), "truncated at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad, &cfg.arch).is_err());
    let mut version = bytes.clone();
    version[4] = version[4].wrapping_add(1);
    assert!(decode_checkpoint(&version, &cfg.arch).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(decode_checkpoint(&extra, &cfg.arch).is_err());
}

#[test]
fn mismatched_architecture_is_rejected() {
    let (cfg, model) = trained();
    let bytes = encode_checkpoint(&model);
    let mut fewer = cfg.arch.clone();
    fewer.channels.pop();
    assert!(decode_checkpoint(&bytes, &fewer).is_err());
    let mut wider = cfg.arch.clone();
    wider.channels[0] = 12;
    assert!(decode_checkpoint(&bytes, &wider).is_err());
}

#[test]
fn missing_file_is_an_error() {
    let (cfg, _) = trained();
    assert!(load_checkpoint(std::path::Path::new("/nonexistent/m.admc"), &cfg.arch).is_err());
}

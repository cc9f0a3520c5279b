mod common;

use causal_cxr::decoder::ComplementMode;
use causal_cxr_cli::config::RunConfig;
use common::small_config;

#[test]
fn documented_defaults_parse_back_to_defaults() {
    let text = RunConfig::documented_defaults();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    let keys = text.lines().filter(|l| !l.starts_with('#')).count();
    let comments = text.lines().filter(|l| l.starts_with('#')).count();
    assert_eq!(keys, comments);
    assert!(RunConfig::default().validate().is_ok());
}

#[test]
fn every_key_round_trips_through_text() {
    let cfg = small_config("seed = 17\nmodel.complement_mode = renormalized\nablation.seeds = 3,4\n");
    assert_eq!(cfg.data.seed, 17);
    assert_eq!(cfg.train.seed, 17);
    assert_eq!(cfg.model.decoder.complement_mode, ComplementMode::Renormalized);
    assert_eq!(cfg.model.backbone.input_size, (32, 32));
    assert_eq!(cfg.model.decoder.hidden_dim, 16);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn malformed_configs_name_the_line() {
    let err = |t: &str| RunConfig::parse(t).unwrap_err().to_string();
    assert!(err("# c\n\nseed = 1\nbogus = 2\n").contains("line 4: unknown key bogus"));
    assert!(err("seed = 1\nseed = 2\n").contains("line 2: key seed set twice"));
    assert!(err("train.epochs = many\n").contains("line 1"));
    assert!(err("model.attention = maybe\n").contains("expected true or false"));
    assert!(err("just words\n").contains("expected key = value"));
    assert!(err("data.seed = 3\n").contains("unknown key data.seed"));
}

#[test]
fn validation_catches_inconsistent_runs() {
    assert!(small_config("train.alpha1 = -1\n").validate().is_err());
    let mut few = small_config("");
    few.eval_resamples = 10;
    assert!(few.validate().is_err());
    assert!(RunConfig::parse("model.hidden_dim = 32\n").unwrap().validate().is_err());
    assert!(RunConfig::parse("model.hidden_dim = 32\nmodel.stage_channels = 8,16,32\n").unwrap().validate().is_ok());
    assert!(small_config("data.rho_test = 2\n").validate().is_err());
    assert!(small_config("").validate().is_ok());
}

#[test]
fn seed_and_out_dir_overrides() {
    let cfg = small_config("").with_seed(9);
    assert_eq!((cfg.seed, cfg.data.seed, cfg.train.seed), (9, 9, 9));
    if std::env::var_os(causal_cxr_cli::config::OUT_DIR_ENV).is_none() {
        let cfg = cfg.with_out_dir(Some("elsewhere".into()));
        assert_eq!(cfg.out_dir, std::path::PathBuf::from("elsewhere"));
        assert_eq!(cfg.dataset_dir(), std::path::PathBuf::from("elsewhere/data"));
    }
}

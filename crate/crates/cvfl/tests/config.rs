use cvfl::config::REQUIRED_KEYS;
use cvfl::{parse_config, CodecChoice, DatasetSource, Error, ExperimentConfig, Overrides};

const MINIMAL: &str = "dataset=synthetic\nM=4\nQ=10\nrounds=100\ncompressor=vector\nbits=2\n";

#[test]
fn minimal_config_takes_documented_defaults() {
    let cfg = parse_config(MINIMAL).unwrap();
    assert_eq!(cfg.parties, 4);
    assert_eq!(cfg.local_iters, 10);
    assert_eq!(cfg.rounds, 100);
    assert_eq!(cfg.compressor, CodecChoice::Vector);
    assert_eq!(cfg.bits, 2);
    let d = ExperimentConfig::default();
    assert_eq!(cfg.batch, d.batch);
    assert_eq!(cfg.step, d.step);
    assert_eq!(cfg.seed, 0);
    assert_eq!(
        cfg.dataset,
        DatasetSource::Synthetic {
            samples: 1000,
            features: 16,
            classes: 4
        }
    );
}

#[test]
fn sections_comments_and_aliases() {
    let text = "# experiment\n[data]\ndataset = synthetic  # inline\nsamples = 200\n\n[protocol]\nparties = 2\nlocal_iters = 3\nrounds = 7\n[codec]\ncompressor = topk\nbits = 8\n";
    let cfg = parse_config(text).unwrap();
    assert_eq!((cfg.parties, cfg.local_iters, cfg.rounds), (2, 3, 7));
    assert!(matches!(cfg.dataset, DatasetSource::Synthetic { samples: 200, .. }));
}

#[test]
fn empty_file_lists_required_keys() {
    let err = parse_config("").unwrap_err().to_string();
    for key in REQUIRED_KEYS {
        assert!(err.contains(key), "{err}");
    }
}

#[test]
fn zero_bits_is_a_constraint_error() {
    let err = parse_config(&MINIMAL.replace("bits=2", "bits=0")).unwrap_err();
    assert!(matches!(err, Error::Config { line: 6, .. }), "{err}");
}

#[test]
fn errors_carry_line_numbers() {
    let cases = [
        ("dataset=synthetic\nM=4\nwat=1\n", 3),
        ("dataset=synthetic\nM=four\n", 2),
        ("dataset=synthetic\nM=4\nQ=0\n", 3),
        ("dataset=synthetic\nthis line has no equals\n", 2),
        ("compressor=zip\n", 1),
    ];
    for (text, line) in cases {
        match parse_config(text) {
            Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
}

#[test]
fn echo_round_trips() {
    let text = format!("{MINIMAL}batch=32\nstep=0.05\nseed=9\nserver_hidden=\nparty_hidden=8,4\nholdout=0.2\ntarget_loss=0.7\n");
    let cfg = parse_config(&text).unwrap();
    assert_eq!(parse_config(&cfg.echo()).unwrap(), cfg);
}

#[test]
fn overrides_replace_config_values() {
    let mut cfg = parse_config(MINIMAL).unwrap();
    cfg.apply(&Overrides {
        seed: Some(3),
        rounds: Some(5),
        compressor: Some(CodecChoice::Scalar),
        bits: Some(4),
        ..Overrides::default()
    })
    .unwrap();
    assert_eq!((cfg.seed, cfg.rounds, cfg.compressor, cfg.bits), (3, 5, CodecChoice::Scalar, 4));
    assert!(cfg
        .apply(&Overrides {
            bits: Some(33),
            ..Overrides::default()
        })
        .is_err());
}

use phenoauth_cli::{ScenarioConfig, TransportKind};

#[test]
fn empty_file_gives_defaults() {
    assert_eq!(ScenarioConfig::from_toml("").unwrap(), ScenarioConfig::default());
}

#[test]
fn full_file_parses() {
    let cfg = ScenarioConfig::from_toml(
        r#"
        seed = 7
        devices = 4
        l = 128
        t_stable = 0.98
        t_e = 0.02
        r = 50
        transport = "socket"
        parallel = true
        out = "runs/a"

        [env]
        temperatures = [25.0, 50.0]
        voltages = [1.5]

        [trials]
        sessions = 10
        mu = 20
        "#,
    )
    .unwrap();
    assert_eq!(cfg.devices, 4);
    assert_eq!(cfg.transport, TransportKind::Socket);
    assert_eq!(cfg.trials.sessions, 10);
    assert_eq!(cfg.trials.ind, 2000);
    assert_eq!(cfg.protocol_config().reliability.repeats, 50);
    assert_eq!(cfg.puf_config().env.temperatures, vec![25.0, 50.0]);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(ScenarioConfig::from_toml("sed = 1").is_err());
    assert!(ScenarioConfig::from_toml("[trials]\nsesions = 3").is_err());
    assert!(ScenarioConfig::from_toml("[puf]\ncolour = 1").is_err());
}

#[test]
fn invalid_values_are_rejected() {
    for text in [
        "devices = 1",
        "l = 100",
        "l = 0",
        "t_e = 0.6",
        "t_e = 0.01\nt_stable = 0.9",
        "r = 0",
        "[trials]\nmu = 0",
        "[env]\nvoltages = []",
        "[puf]\nf_super = 1.5",
        "transport = \"carrier-pigeon\"",
    ] {
        assert!(ScenarioConfig::from_toml(text).is_err(), "accepted {text:?}");
    }
}

#[test]
fn seeds_follow_the_root_seed() {
    let a = ScenarioConfig::default();
    let b = ScenarioConfig { seed: 2, ..a.clone() };
    assert_eq!(a.seeds(), a.clone().seeds());
    assert_ne!(a.seeds().0, b.seeds().0);
    let (devices, adversary, games) = a.seeds();
    assert_eq!(devices.len(), 3);
    assert_ne!(adversary, games);
}

use vpo_core::harness::{
    run_bandwidth, run_mass_join, run_revocation, run_single_join, summary_line, Csv, ExperimentConfig, LatencySource,
};
use vpo_core::modeler::RevocationMethod;
use vpo_core::private::QueryMode;
use vpo_core::Error;

fn cfg(lines: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.apply_file_text(lines).unwrap();
    c
}

#[test]
fn file_lines_set_every_option() {
    let c = cfg("# sample\npublic-size = 40\nprivate-size=12\nsecurity=true\nseed=9\nsynthetic=10,90\n\
                 timer=static\nmethod=dht\nreps=3\nsizes=16,32\nsites=5\nout=/tmp/x  # trailing comment\n");
    assert_eq!((c.public_size, c.private_size, c.seed, c.reps, c.sites), (40, 12, 9, 3, 5));
    assert!(c.security);
    assert_eq!(c.latency, LatencySource::Synthetic { min: 10, max: 90 });
    assert_eq!(c.timer, QueryMode::Static);
    assert_eq!(c.method, RevocationMethod::Dht);
    assert_eq!(c.sizes, vec![16, 32]);
    assert_eq!(c.out, std::path::PathBuf::from("/tmp/x"));
}

#[test]
fn later_settings_override_earlier_ones() {
    let mut c = cfg("seed=1\ntimer=static");
    c.set("seed", "5").unwrap();
    assert_eq!(c.seed, 5);
    assert_eq!(c.timer, QueryMode::Static);
}

#[test]
fn bad_options_are_config_errors() {
    for (k, v) in [
        ("timer", "sometimes"),
        ("method", "carrier-pigeon"),
        ("synthetic", "90"),
        ("synthetic", "90,10"),
        ("seed", "-1"),
        ("sites", "0"),
        ("security", "maybe"),
        ("colour", "blue"),
    ] {
        let err = ExperimentConfig::default().set(k, v).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{k}={v} gave {err:?}");
    }
    assert!(matches!(ExperimentConfig::default().apply_file_text("no equals sign"), Err(Error::Config(_))));
}

#[test]
fn digest_ignores_output_directory_only() {
    let a = cfg("out=/tmp/a");
    let b = cfg("out=/tmp/b");
    let c = cfg("out=/tmp/a\nseed=2");
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), c.digest());
    assert_eq!(a.canonical(), b.canonical());
    assert!(!a.canonical().contains("/tmp/a"));
}

#[test]
fn csv_rendering_and_summary() {
    let mut c = Csv::new(&["a", "b"]);
    c.push(vec!["1".into(), "x".into()]);
    assert_eq!(c.render(), "a,b\n1,x\n");
    assert_eq!(summary_line("run", &[("k", "v".into()), ("n", "3".into())]), "run k=v n=3");
}

#[test]
fn every_row_carries_the_config_digest() {
    let c = cfg("public-size=30\nprivate-size=6\nreps=3\nsynthetic=100,100");
    let r = run_single_join(&c).unwrap();
    let text = r.csv().render();
    for line in text.lines().skip(1) {
        assert!(line.ends_with(&c.digest()));
    }
    assert_eq!(r.converged, 3);
    assert!(!r.flagged());
}

#[test]
fn unconverged_joins_are_flagged() {
    // RTTs of 200 s cannot finish a join inside the timeout.
    let c = cfg("public-size=4\nprivate-size=2\nreps=2\nsynthetic=200000,200000");
    let r = run_single_join(&c).unwrap();
    assert_eq!(r.converged, 0);
    assert!(r.flagged());
    assert!(r.csv().render().contains(",false,"));
}

#[test]
fn reruns_render_identical_csv() {
    let c = cfg("public-size=30\nprivate-size=8\nreps=2\nsynthetic=20,200");
    assert_eq!(run_single_join(&c).unwrap().csv().render(), run_single_join(&c).unwrap().csv().render());
    assert_eq!(run_mass_join(&c).unwrap().csv().render(), run_mass_join(&c).unwrap().csv().render());
    let r = cfg("public-size=30\nprivate-size=8\nmethod=dht\nsynthetic=20,200");
    assert_eq!(run_revocation(&r).unwrap().csv().render(), run_revocation(&r).unwrap().csv().render());
}

#[test]
fn dynamic_nodes_query_once_per_idle_hour() {
    let c = cfg("public-size=30\nprivate-size=8\nsynthetic=100,100\ntimer=dynamic");
    let r = run_bandwidth(&c).unwrap();
    assert!(r.nodes.iter().all(|n| n.queries == 1));
    let s = run_bandwidth(&cfg("public-size=30\nprivate-size=8\nsynthetic=100,100\ntimer=static")).unwrap();
    assert!(s.nodes.iter().all(|n| n.queries == 12));
    assert!(s.mean_bytes_per_sec > r.mean_bytes_per_sec);
}

use limbchan_core::config::RunConfig;

#[test]
fn shipped_benchmark_config_matches_the_builtin_one() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/benchmark.toml");
    let shipped = RunConfig::load(std::path::Path::new(path)).unwrap();
    assert_eq!(shipped.to_toml(), RunConfig::benchmark().to_toml());
    assert_eq!(shipped.hash(), RunConfig::benchmark().hash());
}

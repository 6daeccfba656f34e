use harness::RunConfig;
use matchsearch::bcm::{GateMode, NoiseMode};
use matchsearch::desk::AttributeRates;
use matchsearch::OperatorKind;
use proptest::prelude::*;

fn kinds() -> impl Strategy<Value = Vec<OperatorKind>> {
    prop::sample::subsequence(OperatorKind::ALL.to_vec(), 1..=7)
}

proptest! {
    #[test]
    fn parse_inverts_serialize(
        seed in any::<u32>(),
        rate in 0.0f64..=1.0,
        split in 0.05f64..0.95,
        tau in 0.01f64..10.0,
        ops in kinds(),
        hard in any::<bool>(),
        noise_seed in prop::option::of(any::<u32>()),
        lr in 0.0f64..1.0,
    ) {
        let cfg = RunConfig {
            seed: seed as u64,
            attribute_rates: AttributeRates::uniform(rate),
            split_ratio: split,
            tau,
            operators: ops,
            gate_mode: if hard { GateMode::Hard } else { GateMode::Soft },
            noise_mode: noise_seed.map_or(NoiseMode::Zero, |s| NoiseMode::Sampled { seed: s as u64 }),
            lr_theta: lr,
            ..RunConfig::default()
        };
        prop_assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}

#[test]
fn defaults_parse_from_empty_file() {
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
}

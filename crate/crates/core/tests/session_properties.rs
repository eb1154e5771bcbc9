use std::collections::BTreeMap;

use adaptcat_core::bank::{generate_bank, BankSpec};
use adaptcat_core::engine::{classify, Band, Engine, ExposureConfig, NextStep, StopReason, StudyConfig};
use adaptcat_core::estimate::{AbilityEstimate, Method};
use adaptcat_core::irt::{item_information, Item, Model};
use adaptcat_core::persist::{diff_events, replay, ReplayMode, SessionEvent, Snapshot};
use adaptcat_core::select::{
    acceptance_probability, constrained_weighted_select, mfi_select, precision_weighted_mfi, ExposureLedger,
    SelectionWeights, ShFormula,
};
use adaptcat_core::simlab::{run_session, simulate_examinee_response};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn estimate(theta: f64, se: f64) -> AbilityEstimate {
    AbilityEstimate {
        theta,
        se,
        method: Method::Eap,
        converged: true,
        iterations: 0,
    }
}

fn model() -> impl Strategy<Value = Model> {
    prop_oneof![Just(Model::OnePl), Just(Model::TwoPl), Just(Model::ThreePl), Just(Model::Grm)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mfi_matches_exhaustive_scan(seed in any::<u64>(), theta in -3.0f64..3.0, used in 0usize..20) {
        let bank = generate_bank(&BankSpec::new(Model::TwoPl, 40, seed)).unwrap();
        let administered: Vec<String> = bank.items.iter().take(used).map(|i| i.id.clone()).collect();
        let pick = mfi_select(&bank.items, &administered, theta).unwrap();
        let best = bank.items[used..]
            .iter()
            .map(|it| item_information(it, theta).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(item_information(pick, theta).unwrap(), best);
        prop_assert!(!administered.contains(&pick.id));
    }

    #[test]
    fn precision_weighting_preserves_the_mfi_choice(seed in any::<u64>(), theta in -3.0f64..3.0, se in 0.01f64..3.0) {
        let bank = generate_bank(&BankSpec::new(Model::ThreePl, 30, seed)).unwrap();
        let a = mfi_select(&bank.items, &[], theta).unwrap();
        let b = precision_weighted_mfi(&bank.items, &[], &estimate(theta, se)).unwrap();
        prop_assert_eq!(&a.id, &b.id);
    }

    #[test]
    fn information_only_weights_reduce_to_mfi(seed in any::<u64>(), theta in -3.0f64..3.0) {
        let bank = generate_bank(&BankSpec::new(Model::TwoPl, 30, seed)).unwrap();
        let weights = SelectionWeights::information_only();
        let a = mfi_select(&bank.items, &[], theta).unwrap();
        let b = constrained_weighted_select(&bank.items, &[], &estimate(theta, 0.5), &weights, None, None).unwrap();
        prop_assert_eq!(&a.id, &b.id);
    }

    #[test]
    fn acceptance_is_a_probability(
        admins in prop::collection::vec(0u64..50, 1..8),
        sessions in 0u64..60,
        target in 0.01f64..1.0,
    ) {
        let ids: Vec<String> = (0..admins.len()).map(|i| format!("x{i}")).collect();
        let mut ledger = ExposureLedger::new(ids.clone(), target);
        for _ in 0..sessions {
            ledger.open_session();
        }
        for (id, n) in ids.iter().zip(&admins) {
            for _ in 0..(*n).min(sessions) {
                ledger.record_selection(id).unwrap();
                ledger.record_administration(id).unwrap();
            }
        }
        for id in &ids {
            for f in [ShFormula::Standard, ShFormula::Literal] {
                let p = acceptance_probability(id, &ledger, f);
                prop_assert!((0.0..=1.0).contains(&p));
            }
            prop_assert!(ledger.rate(id) <= 1.0);
        }
    }

    #[test]
    fn bands_partition_the_line(cuts in prop::collection::btree_set(-300i32..300, 1..5), theta in -5.0f64..5.0) {
        let cuts: Vec<f64> = cuts.into_iter().map(|c| c as f64 / 100.0).collect();
        let mut bands = Vec::new();
        let mut lower = None;
        for (i, c) in cuts.iter().enumerate() {
            bands.push(Band { label: format!("b{i}"), lower, upper: Some(*c) });
            lower = Some(*c);
        }
        bands.push(Band { label: "top".into(), lower, upper: None });
        let hits = bands.iter().filter(|b| b.contains(theta)).count();
        prop_assert_eq!(hits, 1);
        prop_assert!(classify(&bands, theta).is_some());
        for c in &cuts {
            // boundaries belong to the band above
            let label = classify(&bands, *c).unwrap();
            let band = bands.iter().find(|b| b.label == label).unwrap();
            prop_assert_eq!(band.lower, Some(*c));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sessions_respect_length_bounds_and_replay(
        model in model(),
        seed in any::<u64>(),
        min_items in 1usize..6,
        extra in 0usize..10,
        min_sem in 0.2f64..0.6,
        adaptive_start in 0usize..4,
        theta in -2.5f64..2.5,
        exposure in any::<bool>(),
    ) {
        let bank = generate_bank(&BankSpec::new(model, 25, seed)).unwrap();
        let max_items = min_items + extra;
        let mut cfg = StudyConfig::new("p", model, min_items, max_items, min_sem);
        cfg.adaptive_start = adaptive_start.min(max_items);
        if exposure {
            cfg.exposure = Some(ExposureConfig::uniform(0.3));
        }
        let engine = Engine::new(cfg, bank).unwrap();
        let mut ledger = engine.new_ledger();
        ledger.open_session();
        let mut answers = ChaCha8Rng::seed_from_u64(seed);

        let mut state = engine.start_session("p", seed, 0);
        let mut log = vec![SessionEvent::created(&state)];
        let before = state.clone();
        engine.begin(&mut state, 1).unwrap();
        log.extend(diff_events(&before, &state));
        let mut t = 2;
        let reason = loop {
            let before = state.clone();
            let step = engine.next_item(&mut state, Some(&ledger), t).unwrap();
            log.extend(diff_events(&before, &state));
            let NextStep::Item(id) = step else {
                let NextStep::Stop(r) = step else { unreachable!() };
                break r;
            };
            // mid-session snapshots resume to the same state
            let snap = Snapshot::from_json(&Snapshot::new(state.clone()).to_json()).unwrap();
            prop_assert_eq!(&snap.state, &state);

            let response = simulate_examinee_response(engine.item(&id).unwrap(), theta, &mut answers);
            let before = state.clone();
            engine.submit_response(&mut state, response, Some(&mut ledger), t).unwrap();
            log.extend(diff_events(&before, &state));
            t += 1;
        };

        let n = state.responses.len();
        prop_assert!(n <= max_items);
        prop_assert!(n >= min_items.min(25));
        prop_assert_eq!(state.trajectory.len(), n);
        match reason {
            StopReason::SemReached => prop_assert!(state.current_estimate().unwrap().se <= min_sem),
            StopReason::MaxItems => prop_assert_eq!(n, max_items),
            StopReason::PoolExhausted => prop_assert_eq!(n, 25),
        }

        let replayed = replay(&engine, &log, ReplayMode::Auto).unwrap();
        prop_assert_eq!(&replayed, &state);
        let a = serde_json::to_string(&engine.finalize(&state).unwrap()).unwrap();
        let b = serde_json::to_string(&engine.finalize(&replayed).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn headless_sessions_are_seed_deterministic(seed in any::<u64>(), theta in -2.0f64..2.0) {
        let bank = generate_bank(&BankSpec::new(Model::Grm, 30, 5)).unwrap();
        let engine = Engine::new(StudyConfig::new("d", Model::Grm, 3, 10, 0.3), bank).unwrap();
        let run = || {
            let mut answers = ChaCha8Rng::seed_from_u64(seed);
            run_session(&engine, theta, seed, &mut answers, None).unwrap()
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn content_targets_reference_bank_groups() {
    let mut spec = BankSpec::new(Model::TwoPl, 30, 1);
    spec.groups = vec!["A".into(), "B".into()];
    let bank = generate_bank(&spec).unwrap();
    let mut cfg = StudyConfig::new("g", Model::TwoPl, 2, 5, 0.3);
    cfg.group_targets = Some(BTreeMap::from([("A".to_string(), 0.5), ("Z".to_string(), 0.5)]));
    assert!(Engine::new(cfg, bank).is_err());
}

#[test]
fn three_pl_guessing_floor_in_simulation() {
    let item = Item::three_pl("g", 1.2, 0.0, 0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hits = (0..20_000)
        .filter(|_| simulate_examinee_response(&item, -8.0, &mut rng).value == 1)
        .count();
    assert!((hits as f64 / 20_000.0 - 0.25).abs() < 0.01);
}

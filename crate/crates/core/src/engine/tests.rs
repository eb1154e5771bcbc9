use super::*;
use crate::bank::{generate_bank, BankSpec};
use crate::irt::{category_probabilities, Model};
use crate::select::mfi_select;
use rand::Rng;

fn bank_2pl(n: usize, seed: u64) -> ItemBank {
    generate_bank(&BankSpec::new(Model::TwoPl, n, seed)).unwrap()
}

fn engine(config: StudyConfig, bank: ItemBank) -> Engine {
    Engine::new(config, bank).unwrap()
}

fn fake_estimate(se: f64) -> TrajectoryPoint {
    TrajectoryPoint {
        estimate: AbilityEstimate {
            theta: 0.0,
            se,
            method: Method::Eap,
            converged: true,
            iterations: 0,
        },
        switched: false,
    }
}

fn with_history(eng: &Engine, n: usize, se: f64) -> SessionState {
    let mut s = eng.start_session("s", 1, 0);
    for it in eng.bank().items.iter().take(n) {
        s.administered.push(it.id.clone());
        s.responses.push(Response::new(&it.id, 1));
        s.trajectory.push(fake_estimate(se));
    }
    s.phase = Phase::Running;
    s
}

/// Answers items by sampling the model at `theta` until the engine stops.
fn run_simulated(eng: &Engine, theta: f64, seed: u64, ledger: Option<&mut ExposureLedger>) -> SessionState {
    let mut answer_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let mut state = eng.start_session(format!("s{seed}"), seed, 0);
    eng.begin(&mut state, 0).unwrap();
    let mut ledger = ledger;
    let mut t = 0;
    loop {
        t += 1000;
        match eng.next_item(&mut state, ledger.as_deref(), t).unwrap() {
            NextStep::Stop(_) => return state,
            NextStep::Item(id) => {
                let probs = category_probabilities(eng.item(&id).unwrap(), theta).unwrap();
                let u: f64 = answer_rng.random();
                let mut acc = 0.0;
                let mut value = probs.len() - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        value = k;
                        break;
                    }
                }
                eng.submit_response(&mut state, Response::new(id, value as u32), ledger.as_deref_mut(), t + 500)
                    .unwrap();
            }
        }
    }
}

#[test]
fn fresh_session_phases() {
    let eng = engine(StudyConfig::new("s", Model::TwoPl, 5, 10, 0.3), bank_2pl(40, 1));
    let s = eng.start_session("a", 1, 10);
    assert_eq!(s.phase, Phase::Created);
    assert!(s.trajectory.is_empty());

    let mut cfg = StudyConfig::new("s", Model::TwoPl, 5, 10, 0.3);
    cfg.demographics = Some(vec![DemographicField {
        name: "age".into(),
        label: None,
        kind: FieldKind::Integer { min: Some(0), max: None },
        required: true,
    }]);
    let eng = engine(cfg, bank_2pl(40, 1));
    let mut s = eng.start_session("b", 1, 10);
    assert_eq!(s.phase, Phase::Demographics);
    assert!(matches!(eng.next_item(&mut s, None, 11), Err(EngineError::WrongPhase { .. })));
    let bad: BTreeMap<String, Value> = [("age".to_string(), Value::from("abc"))].into();
    assert!(matches!(eng.submit_demographics(&mut s, &bad, 12), Err(EngineError::Demographics(_))));
    assert_eq!(s.phase, Phase::Demographics);
    let good: BTreeMap<String, Value> = [("age".to_string(), Value::from(40))].into();
    eng.submit_demographics(&mut s, &good, 12).unwrap();
    assert_eq!(s.phase, Phase::Running);
}

#[test]
fn invalid_config_is_rejected() {
    let err = Engine::new(StudyConfig::new("s", Model::TwoPl, 10, 5, 0.3), bank_2pl(40, 1)).unwrap_err();
    assert!(matches!(err, EngineError::InvalidConfig(_)));
}

#[test]
fn warm_start_uses_central_items() {
    let mut cfg = StudyConfig::new("s", Model::TwoPl, 5, 20, 0.01);
    cfg.adaptive_start = 5;
    // weak items near the centre, sharp items well above it
    let mut items: Vec<Item> = (0..10)
        .map(|i| Item::two_pl(format!("c{i:02}"), 0.6, -0.2 + 0.04 * i as f64))
        .collect();
    items.extend((0..20).map(|i| Item::two_pl(format!("h{i:02}"), 2.0, 0.6 + 0.1 * i as f64)));
    let eng = engine(cfg, ItemBank::new("w", Model::TwoPl, items));
    let mut s = eng.start_session("x", 3, 0);
    eng.begin(&mut s, 0).unwrap();
    for _ in 0..3 {
        let NextStep::Item(id) = eng.next_item(&mut s, None, 1).unwrap() else { panic!() };
        eng.submit_response(&mut s, Response::new(id, 1), None, 2).unwrap();
    }
    // three correct answers push theta up; the warm-start rule still picks
    // among the items closest to the prior mean
    let theta = s.current_estimate().unwrap().theta;
    assert!(theta > 0.5);
    let pool = select::remaining(&eng.bank().items, &s.administered);
    let mut by_center: Vec<&Item> = pool.clone();
    by_center.sort_by(|a, b| a.b.abs().total_cmp(&b.b.abs()));
    let central: Vec<&str> = by_center[..WARM_START_TOP_K].iter().map(|it| it.id.as_str()).collect();
    let NextStep::Item(id) = eng.next_item(&mut s, None, 3).unwrap() else { panic!() };
    assert!(central.contains(&id.as_str()));
    let mfi = mfi_select(&eng.bank().items, &s.administered[..3], theta).unwrap();
    assert!(!central.contains(&mfi.id.as_str()));
    // interim estimates are EAP regardless of the configured method
    assert!(s.trajectory.iter().all(|p| p.estimate.method == Method::Eap));
}

#[test]
fn adaptive_phase_delegates_to_mfi() {
    let mut cfg = StudyConfig::new("s", Model::TwoPl, 10, 20, 0.01);
    cfg.adaptive_start = 5;
    let eng = engine(cfg, bank_2pl(100, 4));
    let mut s = eng.start_session("x", 3, 0);
    eng.begin(&mut s, 0).unwrap();
    for k in 0..5 {
        let NextStep::Item(id) = eng.next_item(&mut s, None, 1).unwrap() else { panic!() };
        eng.submit_response(&mut s, Response::new(id, k % 2), None, 2).unwrap();
    }
    let theta = s.current_estimate().unwrap().theta;
    let expected = mfi_select(&eng.bank().items, &s.administered, theta).unwrap().id.clone();
    assert_eq!(eng.next_item(&mut s, None, 3).unwrap(), NextStep::Item(expected));
}

#[test]
fn stop_rules() {
    let eng = engine(StudyConfig::new("s", Model::TwoPl, 10, 25, 0.25), bank_2pl(40, 1));
    assert_eq!(eng.stop_check(&with_history(&eng, 14, 0.24)), StopDecision::Stop(StopReason::SemReached));
    assert_eq!(eng.stop_check(&with_history(&eng, 25, 0.40)), StopDecision::Stop(StopReason::MaxItems));
    assert_eq!(eng.stop_check(&with_history(&eng, 8, 0.20)), StopDecision::Continue);
    assert_eq!(eng.stop_check(&with_history(&eng, 25, 0.20)), StopDecision::Stop(StopReason::SemReached));

    let mut s = with_history(&eng, 14, 0.24);
    assert_eq!(eng.next_item(&mut s, None, 5).unwrap(), NextStep::Stop(StopReason::SemReached));
    assert_eq!(s.phase, Phase::Finished);
}

#[test]
fn first_response_eap_matches_quadrature_oracle() {
    let bank = ItemBank::new(
        "r",
        Model::OnePl,
        (0..5).map(|i| Item::one_pl(format!("r{i}"), i as f64 * 0.5)).collect(),
    );
    let eng = engine(StudyConfig::new("s", Model::OnePl, 1, 5, 0.01), bank);
    let mut s = eng.start_session("x", 1, 0);
    eng.begin(&mut s, 0).unwrap();
    assert_eq!(eng.next_item(&mut s, None, 1).unwrap(), NextStep::Item("r0".into()));
    let est = eng.submit_response(&mut s, Response::new("r0", 1), None, 2).unwrap();
    // 10,001-point trapezoid oracle of E[theta | correct on b = 0]
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=10_000 {
        let t = -8.0 + 16.0 * i as f64 / 10_000.0;
        let g = (1.0 / (1.0 + (-t).exp())) * (-0.5 * t * t).exp();
        num += t * g;
        den += g;
    }
    assert!((est.theta - num / den).abs() < 1e-3);
    assert_eq!(s.trajectory.len(), 1);
}

#[test]
fn response_guards_leave_state_unchanged() {
    let mut spec = BankSpec::new(Model::Grm, 20, 2);
    spec.categories = 5;
    let eng = engine(StudyConfig::new("s", Model::Grm, 2, 10, 0.3), generate_bank(&spec).unwrap());
    let mut s = eng.start_session("x", 1, 0);
    eng.begin(&mut s, 0).unwrap();
    let NextStep::Item(id) = eng.next_item(&mut s, None, 1).unwrap() else { panic!() };
    let before = s.clone();
    assert!(matches!(
        eng.submit_response(&mut s, Response::new(&id, 7), None, 2),
        Err(EngineError::ResponseOutOfRange { .. })
    ));
    assert_eq!(s, before);
    assert!(matches!(
        eng.submit_response(&mut s, Response::new("nope", 1), None, 2),
        Err(EngineError::StaleItem { .. })
    ));
    eng.submit_response(&mut s, Response::new(&id, 3), None, 2).unwrap();
    let after = s.clone();
    assert_eq!(
        eng.submit_response(&mut s, Response::new(&id, 3), None, 3),
        Err(EngineError::NoOutstandingItem)
    );
    assert_eq!(s, after);
}

#[test]
fn next_item_is_idempotent_while_outstanding() {
    let eng = engine(StudyConfig::new("s", Model::TwoPl, 2, 10, 0.3), bank_2pl(30, 2));
    let mut s = eng.start_session("x", 1, 0);
    eng.begin(&mut s, 0).unwrap();
    let a = eng.next_item(&mut s, None, 1).unwrap();
    let b = eng.next_item(&mut s, None, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(s.administered.len(), 1);
}

#[test]
fn finalize_classifies_with_half_open_bands() {
    let mut cfg = StudyConfig::new("s", Model::TwoPl, 4, 12, 0.3);
    cfg.cutoffs = Some(vec![
        Band::new("None", None, Some(-1.0)),
        Band::new("Mild", Some(-1.0), Some(-0.5)),
        Band::new("Moderate", Some(-0.5), Some(0.5)),
        Band::new("Severe", Some(0.5), None),
    ]);
    let eng = engine(cfg, bank_2pl(45, 3));
    let mut s = with_history(&eng, 12, 0.4);
    assert_eq!(eng.finalize(&s), Err(EngineError::NotFinished));
    eng.next_item(&mut s, None, 99).unwrap();
    for (theta, band) in [(0.7, "Severe"), (-0.5, "Moderate"), (-2.0, "None")] {
        s.trajectory.last_mut().unwrap().estimate.theta = theta;
        let r = eng.finalize(&s).unwrap();
        assert_eq!(r.classification.as_deref(), Some(band));
        assert_eq!(r.stop_reason, Some(StopReason::MaxItems));
        assert_eq!(r.records.len(), 12);
    }

    let plain = engine(StudyConfig::new("s", Model::TwoPl, 4, 12, 0.3), bank_2pl(45, 3));
    let mut s = with_history(&plain, 12, 0.4);
    plain.next_item(&mut s, None, 99).unwrap();
    assert_eq!(plain.finalize(&s).unwrap().classification, None);
}

#[test]
fn pool_exhaustion_before_min_items_warns() {
    let eng = engine(StudyConfig::new("s", Model::TwoPl, 8, 8, 0.01), bank_2pl(8, 5));
    let mut small = eng.clone();
    small.bank.items.truncate(5);
    small.index.retain(|_, i| *i < 5);
    let s = run_simulated(&small, 0.0, 1, None);
    let r = small.finalize(&s).unwrap();
    assert_eq!(r.stop_reason, Some(StopReason::PoolExhausted));
    assert_eq!(r.items_administered, 5);
    assert_eq!(r.warnings.len(), 1);
}

#[test]
fn expiry_is_terminal() {
    let eng = engine(StudyConfig::new("s", Model::TwoPl, 2, 10, 0.3), bank_2pl(30, 2));
    let mut s = eng.start_session("x", 1, 0);
    eng.begin(&mut s, 0).unwrap();
    assert!(!eng.expire_if_idle(&mut s, 30 * 60 * 1000));
    assert!(eng.expire_if_idle(&mut s, 30 * 60 * 1000 + 1));
    assert_eq!(s.phase, Phase::Expired);
    assert!(eng.next_item(&mut s, None, 0).is_err());
    let r = eng.finalize(&s).unwrap();
    assert_eq!(r.disposition, Disposition::Expired);
    assert_eq!(r.stop_reason, None);
}

#[test]
fn sessions_respect_length_bounds_and_replay() {
    let bank = bank_2pl(60, 8);
    let mut cfg = StudyConfig::new("s", Model::TwoPl, 6, 15, 0.35);
    cfg.randomesque = Some(3);
    cfg.adaptive_start = 2;
    let eng = engine(cfg, bank);
    for seed in 0..20 {
        let theta = -2.0 + 0.2 * seed as f64;
        let a = run_simulated(&eng, theta, seed, None);
        let b = run_simulated(&eng, theta, seed, None);
        assert_eq!(a, b);
        let n = a.responses.len();
        assert!((6..=15).contains(&n));
        let mut ids = a.administered.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }
}

#[test]
fn ml_standard_error_never_increases_without_switches() {
    let mut cfg = StudyConfig::new("s", Model::TwoPl, 30, 30, 0.01);
    cfg.estimation.method = Method::Ml;
    let eng = engine(cfg, bank_2pl(120, 9));
    for seed in 0..10 {
        let s = run_simulated(&eng, 0.3, seed, None);
        let ml: Vec<f64> = s
            .trajectory
            .iter()
            .skip_while(|p| p.estimate.method != Method::Ml)
            .map(|p| p.estimate.se)
            .collect();
        let uninterrupted = s
            .trajectory
            .iter()
            .skip_while(|p| p.estimate.method != Method::Ml)
            .all(|p| p.estimate.method == Method::Ml);
        if uninterrupted {
            assert!(ml.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{ml:?}");
        }
    }
}

#[test]
fn exposure_control_records_administrations() {
    let mut cfg = StudyConfig::new("s", Model::TwoPl, 5, 5, 0.01);
    cfg.exposure = Some(ExposureConfig::uniform(0.25));
    let eng = engine(cfg, bank_2pl(60, 11));
    let mut ledger = eng.new_ledger();
    for seed in 0..200 {
        ledger.open_session();
        run_simulated(&eng, 0.0, seed, Some(&mut ledger));
    }
    let total: u64 = eng.bank().items.iter().map(|it| ledger.administrations(&it.id)).sum();
    assert_eq!(total, 200 * 5);
    assert!(ledger.max_rate() < 0.32, "{}", ledger.max_rate());
}

#[test]
fn state_round_trips_through_json() {
    let eng = engine(StudyConfig::new("s", Model::TwoPl, 5, 10, 0.3), bank_2pl(40, 1));
    let s = run_simulated(&eng, 0.5, 4, None);
    let json = serde_json::to_string(&s).unwrap();
    let back: SessionState = serde_json::from_str(&json).unwrap();
    assert_eq!(back, s);
    assert_eq!(back.rng_position(), s.rng_position());
}

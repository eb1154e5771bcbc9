use adaptcat_core::bank::{generate_bank, load_bank, serialize_bank, validate_bank, BankSpec, Format};
use adaptcat_core::estimate::{eap, ml, Bounds, Prior, QuadratureGrid};
use adaptcat_core::irt::{
    category_probabilities, item_information, test_information, Item, Model, Response, ScoredPattern,
};
use proptest::prelude::*;

fn two_pl() -> impl Strategy<Value = Item> {
    (0.2f64..3.0, -3.0f64..3.0).prop_map(|(a, b)| Item::two_pl("i", a, b))
}

fn any_item() -> impl Strategy<Value = Item> {
    prop_oneof![
        (-3.0f64..3.0).prop_map(|b| Item::one_pl("i", b)),
        two_pl(),
        (0.2f64..3.0, -3.0f64..3.0, 0.0f64..0.35).prop_map(|(a, b, c)| Item::three_pl("i", a, b, c)),
        (0.2f64..3.0, -2.5f64..2.5, prop::collection::vec(0.05f64..1.0, 1..6)).prop_map(|(a, start, gaps)| {
            let mut t = vec![start];
            for g in gaps {
                t.push(t.last().unwrap() + g);
            }
            Item::grm("i", a, t)
        }),
    ]
}

/// Items with ids `i0..` and one in-range response to each.
fn pattern() -> impl Strategy<Value = (Vec<Item>, Vec<Response>)> {
    prop::collection::vec((any_item(), 0u32..8), 1..12).prop_map(|pairs| {
        let mut items = Vec::new();
        let mut responses = Vec::new();
        for (k, (mut it, code)) in pairs.into_iter().enumerate() {
            it.id = format!("i{k}");
            let v = code % it.n_categories() as u32;
            responses.push(Response::new(&it.id, v));
            items.push(it);
        }
        (items, responses)
    })
}

proptest! {
    #[test]
    fn categories_form_a_distribution(item in any_item(), theta in -6.0f64..6.0) {
        let p = category_probabilities(&item, theta).unwrap();
        prop_assert_eq!(p.len(), item.n_categories());
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn information_is_nonnegative_and_additive(items in prop::collection::vec(any_item(), 1..10), theta in -4.0f64..4.0) {
        let each: Vec<f64> = items.iter().map(|it| item_information(it, theta).unwrap()).collect();
        prop_assert!(each.iter().all(|&i| i >= 0.0 && i.is_finite()));
        let total = test_information(&items, theta);
        prop_assert!((total - each.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn information_matches_score_variance(item in any_item(), theta in -4.0f64..4.0) {
        // Fisher information is the variance of the per-item score.
        let p = category_probabilities(&item, theta).unwrap();
        let h = 1e-5;
        let lp: Vec<f64> = category_probabilities(&item, theta + h).unwrap().iter().map(|x| x.ln()).collect();
        let lm: Vec<f64> = category_probabilities(&item, theta - h).unwrap().iter().map(|x| x.ln()).collect();
        let var: f64 = p.iter().enumerate().map(|(k, pk)| pk * ((lp[k] - lm[k]) / (2.0 * h)).powi(2)).sum();
        let info = item_information(&item, theta).unwrap();
        prop_assert!((var - info).abs() < 1e-5 * (1.0 + info), "{} vs {}", var, info);
    }

    #[test]
    fn reduced_models_coincide(a in 0.2f64..3.0, b in -3.0f64..3.0, theta in -4.0f64..4.0) {
        let two = category_probabilities(&Item::two_pl("i", a, b), theta).unwrap();
        let three = category_probabilities(&Item::three_pl("i", a, b, 0.0), theta).unwrap();
        let grm = category_probabilities(&Item::grm("i", a, vec![b]), theta).unwrap();
        for k in 0..2 {
            prop_assert!((two[k] - three[k]).abs() < 1e-12);
            prop_assert!((two[k] - grm[k]).abs() < 1e-12);
        }
        let one = category_probabilities(&Item::one_pl("i", b), theta).unwrap();
        let unit = category_probabilities(&Item::two_pl("i", 1.0, b), theta).unwrap();
        prop_assert!((one[1] - unit[1]).abs() < 1e-12);
    }

    #[test]
    fn probability_is_monotone_in_theta(item in any_item(), t in -4.0f64..4.0, d in 0.01f64..2.0) {
        // Expected score increases with ability for every model.
        let expect = |th: f64| -> f64 {
            category_probabilities(&item, th).unwrap().iter().enumerate().map(|(k, p)| k as f64 * p).sum()
        };
        prop_assert!(expect(t + d) >= expect(t) - 1e-12);
    }

    #[test]
    fn score_is_the_loglik_derivative((items, responses) in pattern(), theta in -4.0f64..4.0) {
        let pat = ScoredPattern::new(&items, &responses).unwrap();
        let h = 1e-5;
        let fd = (pat.log_likelihood(theta + h) - pat.log_likelihood(theta - h)) / (2.0 * h);
        prop_assert!((fd - pat.score(theta)).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn eap_stays_inside_the_grid((items, responses) in pattern()) {
        let pat = ScoredPattern::new(&items, &responses).unwrap();
        let grid = QuadratureGrid::default();
        let est = eap(&pat, &Prior::default(), &grid, &Bounds::default()).unwrap();
        prop_assert!(est.theta > -5.0 && est.theta < 5.0);
        prop_assert!(est.se > 0.0 && est.se.is_finite());
    }

    #[test]
    fn interior_ml_estimates_solve_the_score_equation((items, responses) in pattern()) {
        let pat = ScoredPattern::new(&items, &responses).unwrap();
        prop_assume!(!pat.is_extreme());
        let est = ml(&pat, &Bounds::default()).unwrap();
        if est.converged && est.theta.abs() < 4.4 {
            prop_assert!(pat.score(est.theta).abs() < 1e-5 * (1.0 + pat.information(est.theta)));
            prop_assert!((est.se - 1.0 / pat.information(est.theta).sqrt()).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_banks_are_clean_and_reproducible(
        model in prop_oneof![Just(Model::OnePl), Just(Model::TwoPl), Just(Model::ThreePl), Just(Model::Grm)],
        n in 1usize..120,
        seed in any::<u64>(),
        categories in 2usize..7,
    ) {
        let mut spec = BankSpec::new(model, n, seed);
        spec.categories = categories;
        let a = generate_bank(&spec).unwrap();
        let b = generate_bank(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), n);
        prop_assert!(validate_bank(&a).iter().all(|v| !v.is_error()));
        prop_assert!(a.items.iter().all(|it| (0.5..=2.5).contains(&it.a) || model == Model::OnePl));
    }

    #[test]
    fn bank_serialization_round_trips(
        model in prop_oneof![Just(Model::OnePl), Just(Model::TwoPl), Just(Model::ThreePl), Just(Model::Grm)],
        n in 1usize..40,
        seed in any::<u64>(),
    ) {
        let bank = generate_bank(&BankSpec::new(model, n, seed)).unwrap();
        for format in [Format::Csv, Format::Json] {
            let text = serialize_bank(&bank, format);
            let back = load_bank(text.as_bytes(), format).unwrap();
            prop_assert_eq!(back.items.len(), bank.items.len());
            for (x, y) in back.items.iter().zip(&bank.items) {
                prop_assert_eq!(&x.id, &y.id);
                prop_assert_eq!(x.model, y.model);
                prop_assert!((x.a - y.a).abs() <= 1e-12);
                prop_assert!((x.b - y.b).abs() <= 1e-12);
                prop_assert!((x.c - y.c).abs() <= 1e-12);
                prop_assert_eq!(x.thresholds.len(), y.thresholds.len());
                for (s, t) in x.thresholds.iter().zip(&y.thresholds) {
                    prop_assert!((s - t).abs() <= 1e-12);
                }
                prop_assert_eq!(&x.group, &y.group);
            }
        }
    }
}

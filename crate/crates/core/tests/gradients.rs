mod common;

use common::fd::{check, dims, spec, TERMS};
use snapnav::navsim::{generate_dataset, EnvConfig, GeneratorConfig, Split};
use snapnav::policy::{PolicyParams, Variant};
use snapnav::training::{ActionSource, Rollout};

#[test]
fn imitation_gradients_match_finite_differences() {
    for v in Variant::ALL {
        let (n, worst) = check(v, "il");
        assert!(n > 500);
        println!("{v} il: {n} coordinates, worst relative error {worst:.2e}");
    }
}

#[test]
fn actor_critic_gradients_match_finite_differences() {
    for v in Variant::ALL {
        let (n, worst) = check(v, "rl");
        println!("{v} rl: {n} coordinates, worst relative error {worst:.2e}");
    }
}

#[test]
fn attention_gradients_match_finite_differences() {
    for v in Variant::ALL {
        let (n, worst) = check(v, "attn");
        println!("{v} attn: {n} coordinates, worst relative error {worst:.2e}");
    }
}

#[test]
fn gradients_are_nonzero_where_the_term_reaches() {
    // guards against a vacuous comparison of zeros
    let data = generate_dataset(&GeneratorConfig::small(), 21).unwrap();
    let ep = &data.split(Split::Train)[3];
    for v in Variant::ALL {
        let params = PolicyParams::init(v, dims(&data), 77).unwrap();
        let r = Rollout::run(
            &params,
            ep,
            &data,
            &EnvConfig::default(),
            ActionSource::Teacher,
        )
        .unwrap();
        for term in TERMS {
            let (_, g) = r
                .gradient(ep, &data, &spec(term, r.advantages(0.9)))
                .unwrap();
            let name = |s: &str| {
                params
                    .layout()
                    .specs
                    .iter()
                    .position(|x| x.name == s)
                    .unwrap()
            };
            let norm = |i: usize| g.blocks[i].data.iter().map(|x| x * x).sum::<f64>();
            assert!(norm(name("w_instruction")) > 0.0, "{v} {term}");
            let critic = norm(name("critic.w"));
            assert_eq!(
                critic > 0.0,
                term == "rl",
                "{v} {term}: critic gradient {critic}"
            );
        }
    }
}

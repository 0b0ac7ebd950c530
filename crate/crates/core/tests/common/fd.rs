//! Analytic gradients against central finite differences.
//!
//! Each case fixes a sampled action sequence (replayed with forced actions)
//! and freezes the advantages, so the objective is a smooth function of the
//! parameters alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snapnav::navsim::{generate_dataset, Dataset, EnvConfig, Episode, GeneratorConfig, Split};
use snapnav::policy::{PolicyDims, PolicyParams, Variant};
use snapnav::training::{ActionSource, LossSpec, Rollout};

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely; central differences
/// cannot resolve relative error below the rounding noise of the objective.
pub const FLOOR: f64 = 1e-6;
pub const COORDS_PER_BLOCK: usize = 20;
pub const TERMS: [&str; 3] = ["il", "rl", "attn"];

pub fn dims(data: &Dataset) -> PolicyDims {
    PolicyDims {
        vocab_size: data.vocabulary.size,
        max_instruction_len: data.max_instruction_len(),
        d_view: data.d_view(),
        d_emb: 6,
        d_model: 6,
        d_ff: 5,
        self_layers: 1,
        cross_layers: 2,
    }
}

pub fn spec(term: &str, frozen: Vec<f64>) -> LossSpec {
    let (il, rl, attn) = match term {
        "il" => (1.0, 0.0, 0.0),
        "rl" => (0.0, 1.0, 0.0),
        "attn" => (0.0, 0.0, 1.0),
        _ => unreachable!(),
    };
    LossSpec {
        il,
        rl,
        attn,
        gamma: 0.9,
        critic_weight: 0.5,
        frozen_advantages: Some(frozen),
    }
}

fn objective(
    params: &PolicyParams,
    ep: &Episode,
    data: &Dataset,
    actions: &[usize],
    spec: &LossSpec,
) -> f64 {
    let r = Rollout::run(
        params,
        ep,
        data,
        &EnvConfig::default(),
        ActionSource::Forced(actions),
    )
    .unwrap();
    r.objective(ep, data, spec).unwrap()
}

/// Checks 20 coordinates per block (all of them for small blocks) and
/// returns how many were compared and the worst relative error seen.
pub fn check(variant: Variant, term: &str) -> (usize, f64) {
    let data = generate_dataset(&GeneratorConfig::small(), 21).unwrap();
    let params = PolicyParams::init(variant, dims(&data), 77).unwrap();
    let ep = &data.split(Split::Train)[3];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sampled = Rollout::run(
        &params,
        ep,
        &data,
        &EnvConfig::default(),
        ActionSource::Sample(&mut rng),
    )
    .unwrap();
    let actions = sampled.actions();
    assert!(
        actions.len() >= 3,
        "want a multi-step trajectory, got {actions:?}"
    );
    let loss = spec(term, sampled.advantages(0.9));

    let replay = Rollout::run(
        &params,
        ep,
        &data,
        &EnvConfig::default(),
        ActionSource::Forced(&actions),
    )
    .unwrap();
    let (_, grads) = replay.gradient(ep, &data, &loss).unwrap();

    let mut pick = ChaCha8Rng::seed_from_u64(99);
    let (mut checked, mut worst) = (0, 0.0f64);
    for (b, spec_b) in params.layout().specs.iter().enumerate() {
        let n = params.blocks[b].len();
        let coords: Vec<usize> = if n <= COORDS_PER_BLOCK {
            (0..n).collect()
        } else {
            (0..COORDS_PER_BLOCK)
                .map(|_| pick.gen_range(0..n))
                .collect()
        };
        for i in coords {
            let mut plus = params.clone();
            plus.blocks[b].data[i] += H;
            let mut minus = params.clone();
            minus.blocks[b].data[i] -= H;
            let numeric = (objective(&plus, ep, &data, &actions, &loss)
                - objective(&minus, ep, &data, &actions, &loss))
                / (2.0 * H);
            let analytic = grads.blocks[b].data[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            assert!(
                rel < TOLERANCE,
                "{variant} {term}: block {} entry {i}: analytic {analytic:e} numeric {numeric:e} (rel {rel:e})",
                spec_b.name
            );
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (checked, worst)
}

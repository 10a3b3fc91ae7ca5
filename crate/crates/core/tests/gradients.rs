//! Analytic gradients of the full objective against guarded central
//! differences.

mod common;

use std::collections::BTreeMap;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weathercity_core::train::evaluate;

#[derive(Default)]
struct Tally {
    checked: usize,
    kinks: usize,
    /// Per parameter group, probes with a gradient well above the floor.
    significant: BTreeMap<&'static str, usize>,
    mismatches: Vec<String>,
}

fn check(seed: u64, t: &mut Tally) {
    let p = tiny_problem(seed);
    let eval = evaluate(&p.graph, &p.frame, Some(&p.raw), &p.config, true).unwrap();
    let l = eval.loss;
    assert!(l.rgb > 0.0 && l.content > 0.0 && l.depth > 0.0 && l.opacity > 0.0 && l.regularization > 0.0, "{l:?}");
    let grads = eval.grads.unwrap();
    let fp = fingerprint(&p, &p.graph);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    for param in probe_set(&p.graph, &p.frame.weather, &mut rng) {
        let a = analytic(&grads, &param);
        match central_difference(&p, &param, fp) {
            FdOutcome::Value(fd, step) => {
                t.checked += 1;
                if a.abs() > 1e-5 {
                    *t.significant.entry(param.group()).or_default() += 1;
                }
                if !grad_close(a, fd) {
                    t.mismatches.push(format!("seed {seed} {param:?}: analytic {a:.6e} fd {fd:.6e} (h {step:.0e})"));
                }
            }
            FdOutcome::Kink => t.kinks += 1,
        }
    }
}

#[test]
fn full_objective_matches_finite_differences() {
    let mut t = Tally::default();
    for seed in 0..10 {
        check(seed, &mut t);
    }
    assert!(t.kinks * 20 < t.checked, "too many kinks: {} of {}", t.kinks, t.checked + t.kinks);
    for group in ["position", "log_scale", "rotation", "opacity", "feature", "offset", "decoder", "sky"] {
        assert!(t.significant.get(group).copied().unwrap_or(0) > 0, "no informative probe for {group}");
    }
    assert!(t.mismatches.is_empty(), "{} mismatches of {}:\n{}", t.mismatches.len(), t.checked, t.mismatches.join("\n"));
}

#[test]
fn fingerprint_detects_a_blend_list_change() {
    let p = tiny_problem(3);
    let base = fingerprint(&p, &p.graph);
    let mut g = p.graph.clone();
    g.background.gaussians[0].position.x += 5.0;
    assert_ne!(fingerprint(&p, &g), base);
    assert_eq!(fingerprint(&p, &p.graph.clone()), base);
}

//! Built-in reference scenarios.
//!
//! These are the models shipped with the crate (also as JSON files under
//! `scenarios/`). The single-site ones have closed forms used throughout the
//! test suite; the multi-site ones exercise motion, killing and
//! site-dependent reproduction. Multi-site rate matrices are reversible with
//! respect to the site weights so the dual semigroup stays sub-Markov.

use crate::model::{Atom, Scenario, TailDescriptor};

/// Single site, quadratic branching, unit rates. Extinction functional is 1,
/// the skeleton is a binary-split process at unit rate.
pub fn feller1() -> Scenario {
    Scenario::assemble(
        "feller1".into(),
        vec![1.0],
        vec![vec![0.0]],
        vec![1.0],
        vec![1.0],
        vec![vec![]],
        None,
        vec![1.0],
    )
    .expect("built-in scenario is valid")
}

/// feller1 with doubled linear growth; extinction functional is 2.
pub fn feller_alpha2() -> Scenario {
    Scenario::assemble(
        "feller_alpha2".into(),
        vec![1.0],
        vec![vec![0.0]],
        vec![2.0],
        vec![1.0],
        vec![vec![]],
        None,
        vec![1.0],
    )
    .expect("built-in scenario is valid")
}

/// Single site, pure-jump reproduction: one atom of weight 2 at size 1 and
/// no quadratic term.
pub fn poissonic() -> Scenario {
    Scenario::assemble(
        "poissonic".into(),
        vec![1.0],
        vec![vec![0.0]],
        vec![1.0],
        vec![0.0],
        vec![vec![Atom { r: 1.0, w: 2.0 }]],
        None,
        vec![1.0],
    )
    .expect("built-in scenario is valid")
}

/// Two sites with symmetric unit-rate motion and site-dependent growth.
pub fn twosite() -> Scenario {
    Scenario::assemble(
        "twosite".into(),
        vec![1.0, 1.0],
        vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
        vec![1.5, 0.5],
        vec![1.0, 1.0],
        vec![vec![], vec![]],
        None,
        vec![0.5, 0.5],
    )
    .expect("built-in scenario is valid")
}

/// Three sites with non-uniform weights, killing at two sites, and a mix of
/// quadratic and atomic reproduction. The rate matrix is reversible with
/// respect to the weights.
pub fn threesite() -> Scenario {
    Scenario::assemble(
        "threesite".into(),
        vec![1.0, 0.5, 2.0],
        vec![
            vec![-1.0, 0.5, 0.4],
            vec![1.0, -3.0, 2.0],
            vec![0.2, 0.5, -0.75],
        ],
        vec![1.2, 0.4, 0.9],
        vec![0.8, 1.0, 0.5],
        vec![
            vec![Atom { r: 0.8, w: 0.5 }],
            vec![],
            vec![Atom { r: 1.5, w: 0.3 }, Atom { r: 0.4, w: 1.0 }],
        ],
        None,
        vec![0.5, 0.25, 0.25],
    )
    .expect("built-in scenario is valid")
}

/// poissonic plus an analytic heavy-tail descriptor used only by the
/// L log L criterion check. `q` is the logarithmic exponent.
pub fn log_tail(q: f64) -> Scenario {
    Scenario::assemble(
        format!("log_tail_q{q}"),
        vec![1.0],
        vec![vec![0.0]],
        vec![1.0],
        vec![0.0],
        vec![vec![Atom { r: 1.0, w: 2.0 }]],
        Some(TailDescriptor {
            form: "log-heavy".into(),
            c: 0.5,
            power: 2.0,
            log_power: q,
            cutoff: 2.0,
        }),
        vec![1.0],
    )
    .expect("built-in scenario is valid")
}

/// All shipped scenarios that pass every assumption, in deterministic order.
pub fn shipped() -> Vec<Scenario> {
    vec![feller1(), poissonic(), twosite(), threesite()]
}

/// The shipped scenarios with more than one site.
pub fn shipped_multisite() -> Vec<Scenario> {
    vec![twosite(), threesite()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_assumptions;

    #[test]
    fn shipped_scenarios_pass_assumptions() {
        for s in shipped() {
            let rep = validate_assumptions(&s);
            assert!(rep.failures.is_empty(), "{}: {:?}", s.name, rep.failures);
        }
    }
}

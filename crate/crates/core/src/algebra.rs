//! Reduction algebras: a ring (⊕, ⊗, ⊖, 0, 1) plus a homomorphism E with
//! E(a⊕b) = E(a)⊗E(b). The softmax instance (⊕ = +, ⊗ = ×, E = exp) is what
//! licenses rewriting the two-pass stable softmax into a single online pass.
//!
//! Axioms are checked on sampled values, not proved; see `check_algebra`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type Bin = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type Un = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct ReductionAlgebra {
    pub name: String,
    /// ⊕ — the reduction combiner.
    pub oplus: Bin,
    /// ⊗ — the rescaling operator E maps ⊕ into.
    pub otimes: Bin,
    /// ⊖ — additive inverse under ⊕.
    pub oneg: Un,
    /// identity of ⊕
    pub zero: f64,
    /// identity of ⊗
    pub one: f64,
    /// E — the homomorphism from (carrier, ⊕) to (carrier, ⊗).
    pub hom: Un,
}

impl std::fmt::Debug for ReductionAlgebra {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReductionAlgebra")
            .field("name", &self.name)
            .field("zero", &self.zero)
            .field("one", &self.one)
            .finish()
    }
}

/// The algebra behind online softmax: ⊕ = +, ⊗ = ×, ⊖ = negation, E = exp.
pub fn softmax_algebra() -> ReductionAlgebra {
    ReductionAlgebra {
        name: "softmax".into(),
        oplus: Arc::new(|a, b| a + b),
        otimes: Arc::new(|a, b| a * b),
        oneg: Arc::new(|a| -a),
        zero: 0.0,
        one: 1.0,
        hom: Arc::new(f64::exp),
    }
}

/// Deliberately broken ring: ⊗ = subtraction, which kills associativity,
/// the ⊗-identity, and distributivity. Used to prove the checker has teeth.
pub fn broken_otimes_algebra() -> ReductionAlgebra {
    ReductionAlgebra {
        name: "broken-otimes".into(),
        otimes: Arc::new(|a, b| a - b),
        ..softmax_algebra()
    }
}

/// Open registry so synthetic rings can be added by tests and tools.
#[derive(Debug, Default)]
pub struct AlgebraRegistry {
    map: BTreeMap<String, ReductionAlgebra>,
}

impl AlgebraRegistry {
    pub fn with_builtins() -> Self {
        let mut r = AlgebraRegistry::default();
        r.register(softmax_algebra());
        r
    }

    pub fn register(&mut self, alg: ReductionAlgebra) {
        self.map.insert(alg.name.clone(), alg);
    }

    pub fn get(&self, name: &str) -> Option<&ReductionAlgebra> {
        self.map.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.map.keys().map(|s| s.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomCheck {
    pub axiom: String,
    pub passed: bool,
    /// Worst relative residual observed across the sample grid.
    pub worst_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgebraReport {
    pub algebra: String,
    pub tolerance: f64,
    pub axioms: Vec<AxiomCheck>,
    pub passed: bool,
}

fn rel_residual(lhs: f64, rhs: f64) -> f64 {
    let denom = lhs.abs().max(rhs.abs()).max(1.0);
    let r = (lhs - rhs).abs() / denom;
    if r.is_nan() {
        f64::INFINITY
    } else {
        r
    }
}

/// Check every ring axiom and the homomorphism law on all sample
/// pairs/triples, reporting the worst relative residual per axiom.
pub fn check_algebra(alg: &ReductionAlgebra, samples: &[f64], tol: f64) -> Result<AlgebraReport> {
    if samples.is_empty() {
        return Err(Error::Other("check_algebra: samples must be nonempty".into()));
    }
    let op = &alg.oplus;
    let ot = &alg.otimes;
    let mut axioms: Vec<AxiomCheck> = Vec::new();
    let mut check = |axiom: &str, worst: f64| {
        axioms.push(AxiomCheck { axiom: axiom.into(), passed: worst <= tol, worst_residual: worst });
    };

    let mut w_oplus_assoc = 0.0f64;
    let mut w_otimes_assoc = 0.0f64;
    let mut w_distrib = 0.0f64;
    for &a in samples {
        for &b in samples {
            for &c in samples {
                w_oplus_assoc = w_oplus_assoc.max(rel_residual(op(op(a, b), c), op(a, op(b, c))));
                w_otimes_assoc = w_otimes_assoc.max(rel_residual(ot(ot(a, b), c), ot(a, ot(b, c))));
                w_distrib = w_distrib.max(rel_residual(ot(a, op(b, c)), op(ot(a, b), ot(a, c))));
            }
        }
    }

    let mut w_zero = 0.0f64;
    let mut w_one = 0.0f64;
    let mut w_inv = 0.0f64;
    let mut w_hom = 0.0f64;
    for &a in samples {
        w_zero = w_zero.max(rel_residual(op(a, alg.zero), a));
        w_zero = w_zero.max(rel_residual(op(alg.zero, a), a));
        w_one = w_one.max(rel_residual(ot(a, alg.one), a));
        w_one = w_one.max(rel_residual(ot(alg.one, a), a));
        w_inv = w_inv.max(rel_residual(op(a, (alg.oneg)(a)), alg.zero));
        for &b in samples {
            w_hom = w_hom.max(rel_residual((alg.hom)(op(a, b)), ot((alg.hom)(a), (alg.hom)(b))));
        }
    }
    let w_hom_zero = rel_residual((alg.hom)(alg.zero), alg.one);

    check("oplus associative", w_oplus_assoc);
    check("oplus identity (zero)", w_zero);
    check("additive inverse", w_inv);
    check("otimes associative", w_otimes_assoc);
    check("otimes identity (one)", w_one);
    check("otimes distributes over oplus", w_distrib);
    check("homomorphism E(a+b) = E(a)*E(b)", w_hom);
    check("E(zero) = one", w_hom_zero);

    let passed = axioms.iter().all(|a| a.passed);
    Ok(AlgebraReport { algebra: alg.name.clone(), tolerance: tol, axioms, passed })
}

/// Two serial passes: the final max, then the shifted ⊕-accumulation.
pub fn run_stable(x: &[f64], alg: &ReductionAlgebra) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut d = alg.zero;
    for &v in x {
        d = (alg.oplus)(d, (alg.hom)((alg.oplus)(v, (alg.oneg)(m))));
    }
    Ok((m, d))
}

/// Running (max, rescaled accumulator) state of the single-pass reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineReductionState {
    pub m: f64,
    pub acc: f64,
}

impl OnlineReductionState {
    /// Seed from the first element: m = x, acc = E(x ⊕ ⊖x) = one.
    pub fn first(x: f64, alg: &ReductionAlgebra) -> Self {
        OnlineReductionState { m: x, acc: (alg.hom)((alg.oplus)(x, (alg.oneg)(x))) }
    }

    /// Fold in one element, rescaling the accumulator when the max moves.
    pub fn step(&mut self, x: f64, alg: &ReductionAlgebra) {
        let m_new = self.m.max(x);
        if m_new != self.m {
            self.acc = (alg.otimes)(self.acc, (alg.hom)((alg.oplus)(self.m, (alg.oneg)(m_new))));
            self.m = m_new;
        }
        self.acc = (alg.oplus)(self.acc, (alg.hom)((alg.oplus)(x, (alg.oneg)(self.m))));
    }
}

/// Single pass over `x`, returning (m_N, d_N). The first element seeds the
/// state directly: starting from m = −∞ would feed ⊖(−∞) into an arbitrary
/// algebra's E, which only happens to be benign for exp.
pub fn run_online(x: &[f64], alg: &ReductionAlgebra) -> Result<(f64, f64)> {
    let trace = run_online_trace(x, alg)?;
    let last = trace.last().unwrap();
    Ok((last.m, last.acc))
}

/// Full per-step state sequence; used by the closed-form induction test.
pub fn run_online_trace(x: &[f64], alg: &ReductionAlgebra) -> Result<Vec<OnlineReductionState>> {
    if x.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut st = OnlineReductionState::first(x[0], alg);
    let mut trace = Vec::with_capacity(x.len());
    trace.push(st);
    for &v in &x[1..] {
        st.step(v, alg);
        trace.push(st);
    }
    Ok(trace)
}

/// The closed form the recurrence must satisfy at every prefix j:
/// do[j] = (⊕_{i≤j} E(x[i])) ⊗ E(⊖ m[j]).
pub fn closed_form_prefix(x: &[f64], j: usize, alg: &ReductionAlgebra) -> (f64, f64) {
    let m = x[..=j].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = alg.zero;
    for &v in &x[..=j] {
        s = (alg.oplus)(s, (alg.hom)(v));
    }
    (m, (alg.otimes)(s, (alg.hom)((alg.oneg)(m))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-30)
    }

    #[test]
    fn softmax_algebra_passes_axioms() {
        let alg = softmax_algebra();
        let samples = [-1.0, 0.0, 0.5, 3.0];
        let report = check_algebra(&alg, &samples, 1e-12).unwrap();
        assert!(report.passed, "{report:?}");
        let hom = report
            .axioms
            .iter()
            .find(|a| a.axiom.starts_with("homomorphism"))
            .unwrap();
        assert!(hom.worst_residual <= 1e-12);
    }

    #[test]
    fn hom_of_zero_is_one_exactly() {
        let alg = softmax_algebra();
        assert_eq!((alg.hom)(alg.zero), alg.one);
    }

    #[test]
    fn broken_otimes_fails_distributivity() {
        let alg = broken_otimes_algebra();
        let report = check_algebra(&alg, &[-1.0, 0.0, 0.5, 3.0], 1e-12).unwrap();
        assert!(!report.passed);
        let dist = report
            .axioms
            .iter()
            .find(|a| a.axiom.contains("distributes"))
            .unwrap();
        assert!(!dist.passed);
    }

    #[test]
    fn report_serializes() {
        let report =
            check_algebra(&softmax_algebra(), &[0.0, 1.0], 1e-12).unwrap();
        let s = serde_json::to_string(&report).unwrap();
        let back: AlgebraReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back.axioms.len(), report.axioms.len());
    }

    #[test]
    fn stable_known_values() {
        let alg = softmax_algebra();
        assert_eq!(run_stable(&[0.0, 0.0], &alg).unwrap(), (0.0, 2.0));
        // m = 3, d = e^-2 + e^-1 + 1 = 1.5032147244080550135
        let (m, d) = run_stable(&[1.0, 2.0, 3.0], &alg).unwrap();
        assert_eq!(m, 3.0);
        assert!(rel(d, 1.5032147244080550135) < 1e-15, "{d}");
        // singleton
        assert_eq!(run_stable(&[-7.25], &alg).unwrap(), (-7.25, 1.0));
    }

    #[test]
    fn empty_sequence_errors() {
        let alg = softmax_algebra();
        assert!(matches!(run_stable(&[], &alg), Err(Error::EmptyReduction)));
        assert!(matches!(run_online(&[], &alg), Err(Error::EmptyReduction)));
    }

    #[test]
    fn ascending_input_rescales_every_step() {
        let alg = softmax_algebra();
        let x: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let (ms, ds) = run_stable(&x, &alg).unwrap();
        let (mo, do_) = run_online(&x, &alg).unwrap();
        assert_eq!(ms, mo);
        assert!(rel(ds, do_) < 1e-12);
    }

    #[test]
    fn descending_input_never_rescales_after_first() {
        let alg = softmax_algebra();
        let x = [5.0, 4.0, 3.0, 2.0];
        let trace = run_online_trace(&x, &alg).unwrap();
        assert!(trace.iter().all(|s| s.m == 5.0));
        let (ms, ds) = run_stable(&x, &alg).unwrap();
        assert_eq!(trace.last().unwrap().m, ms);
        assert!(rel(trace.last().unwrap().acc, ds) < 1e-12);
    }

    #[test]
    fn all_equal_and_duplicated_max() {
        let alg = softmax_algebra();
        for x in [vec![2.0; 17], vec![1.0, 9.0, 3.0, 9.0, 9.0, -4.0]] {
            let (ms, ds) = run_stable(&x, &alg).unwrap();
            let (mo, do_) = run_online(&x, &alg).unwrap();
            assert_eq!(ms, mo);
            assert!(rel(ds, do_) < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn online_matches_stable(x in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let alg = softmax_algebra();
            let (ms, ds) = run_stable(&x, &alg).unwrap();
            let (mo, do_) = run_online(&x, &alg).unwrap();
            prop_assert_eq!(ms, mo);
            prop_assert!(rel(ds, do_) < 1e-12);
        }

        #[test]
        fn recurrence_matches_closed_form(x in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let alg = softmax_algebra();
            let trace = run_online_trace(&x, &alg).unwrap();
            for (j, st) in trace.iter().enumerate() {
                let (m, d) = closed_form_prefix(&x, j, &alg);
                prop_assert_eq!(st.m, m);
                prop_assert!(rel(st.acc, d) < 1e-10, "j={} acc={} closed={}", j, st.acc, d);
            }
        }

        #[test]
        fn permutation_robust(
            x in proptest::collection::vec(-10.0f64..10.0, 2..64),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let alg = softmax_algebra();
            let mut shuffled = x.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.shuffle(&mut rng);
            let (m1, d1) = run_online(&x, &alg).unwrap();
            let (m2, d2) = run_online(&shuffled, &alg).unwrap();
            prop_assert_eq!(m1, m2);
            prop_assert!(rel(d1, d2) < 1e-10);
        }
    }
}

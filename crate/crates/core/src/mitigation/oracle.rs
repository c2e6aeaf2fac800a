//! Exact enumeration check of the instance-weight identity
//! `E_P[w L] = E_Q[L]` with `w = P(y) / P(y|m)`.
//!
//! A [`DiscreteJoint`] stores the mask-neutral table `Q(x, y, m, s)`; the
//! biased table `P(x, y, m)` is `Q(x, y, m | s = 1)` unless given explicitly.
//! Features and masks are small bit vectors, so `x ⊙ m` is `x & m`.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::stream;

/// Arithmetic the oracle runs in: exact rationals or `f64`.
pub trait Field: Clone + Debug + PartialOrd + num_traits::Num + Signed {
    const NAME: &'static str;
    fn ratio(n: i64, d: i64) -> Self;
    fn approx(&self) -> f64;
    /// Equality used by the validator: exact for rationals, 1e-12 relative
    /// for floats.
    fn close(&self, other: &Self) -> bool;
}

impl Field for f64 {
    const NAME: &'static str = "f64";

    fn ratio(n: i64, d: i64) -> Self {
        n as f64 / d as f64
    }

    fn approx(&self) -> f64 {
        *self
    }

    fn close(&self, other: &Self) -> bool {
        (self - other).abs() <= 1e-12 * self.abs().max(other.abs()).max(1.0)
    }
}

impl Field for BigRational {
    const NAME: &'static str = "rational";

    fn ratio(n: i64, d: i64) -> Self {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn approx(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn close(&self, other: &Self) -> bool {
        self == other
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint<F> {
    pub nx: usize,
    pub nm: usize,
    /// `Q(x, y, m, s)` flattened as `[x][y][m][s]`, with `y, s ∈ {0, 1}`.
    pub q: Vec<F>,
    /// Optional explicit `P(x, y, m)`, flattened as `[x][y][m]`.
    pub p: Option<Vec<F>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub expected_weight: f64,
    pub exact: bool,
}

impl OracleOutcome {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

fn zero<F: Field>() -> F {
    F::zero()
}

fn sum<F: Field>(it: impl Iterator<Item = F>) -> F {
    it.fold(zero(), |a, b| a + b)
}

fn violation(tag: &'static str, detail: impl Into<String>) -> Error {
    Error::Assumption {
        tag,
        detail: detail.into(),
    }
}

impl<F: Field> DiscreteJoint<F> {
    pub fn new(nx: usize, nm: usize, q: Vec<F>) -> Result<Self> {
        if nx == 0 || nm == 0 || q.len() != nx * 2 * nm * 2 {
            return Err(Error::Shape(format!("Q table of length {} for {nx}x2x{nm}x2", q.len())));
        }
        Ok(Self { nx, nm, q, p: None })
    }

    pub fn with_p(mut self, p: Vec<F>) -> Result<Self> {
        if p.len() != self.nx * 2 * self.nm {
            return Err(Error::Shape(format!("P table of length {}", p.len())));
        }
        self.p = Some(p);
        Ok(self)
    }

    fn qi(&self, x: usize, y: usize, m: usize, s: usize) -> &F {
        &self.q[((x * 2 + y) * self.nm + m) * 2 + s]
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let (nx, nm) = (self.nx, self.nm);
        (0..nx).flat_map(move |x| (0..2).flat_map(move |y| (0..nm).map(move |m| (x, y, m))))
    }

    /// `Q(x, y, m)`, summed over `s`.
    pub fn q_xym(&self, x: usize, y: usize, m: usize) -> F {
        self.qi(x, y, m, 0).clone() + self.qi(x, y, m, 1).clone()
    }

    pub fn q_selected(&self) -> F {
        sum(self.cells().map(|(x, y, m)| self.qi(x, y, m, 1).clone()))
    }

    /// `Q(x, y, m | s = 1)`.
    pub fn derived_p(&self, x: usize, y: usize, m: usize) -> F {
        self.qi(x, y, m, 1).clone() / self.q_selected()
    }

    /// `P(x, y, m)`: explicit table if given, else derived.
    pub fn p_xym(&self, x: usize, y: usize, m: usize) -> F {
        match &self.p {
            Some(p) => p[(x * 2 + y) * self.nm + m].clone(),
            None => self.derived_p(x, y, m),
        }
    }

    fn q_ym(&self, y: usize, m: usize) -> F {
        sum((0..self.nx).map(|x| self.q_xym(x, y, m)))
    }

    fn q_ym_selected(&self, y: usize, m: usize) -> F {
        sum((0..self.nx).map(|x| self.qi(x, y, m, 1).clone()))
    }

    fn q_y(&self, y: usize) -> F {
        sum((0..self.nm).map(|m| self.q_ym(y, m)))
    }

    fn q_m(&self, m: usize) -> F {
        sum((0..2).map(|y| self.q_ym(y, m)))
    }

    pub fn p_ym(&self, y: usize, m: usize) -> F {
        sum((0..self.nx).map(|x| self.p_xym(x, y, m)))
    }

    pub fn p_y(&self, y: usize) -> F {
        sum((0..self.nm).map(|m| self.p_ym(y, m)))
    }

    pub fn p_m(&self, m: usize) -> F {
        sum((0..2).map(|y| self.p_ym(y, m)))
    }

    /// `w(y, m) = P(y) / P(y | m)`.
    pub fn weight(&self, y: usize, m: usize) -> F {
        self.p_y(y) * self.p_m(m) / self.p_ym(y, m)
    }

    /// Checks that both tables are distributions, then runs the `Eq (1)`
    /// to `Eq (4)` checks; the error carries the tag of the first failure.
    pub fn validate(&self) -> Result<()> {
        let one = F::one();
        if self.q.iter().any(|v| *v < F::zero()) || !sum(self.q.iter().cloned()).close(&one) {
            return Err(violation("distribution", "Q is not a probability table"));
        }
        let qs = self.q_selected();
        if !(qs > F::zero()) {
            return Err(violation("Eq (3)", "Q(S=1) = 0"));
        }
        if let Some(p) = &self.p {
            if p.iter().any(|v| *v < F::zero()) || !sum(p.iter().cloned()).close(&one) {
                return Err(violation("distribution", "P is not a probability table"));
            }
            for (x, y, m) in self.cells() {
                if !self.p_xym(x, y, m).close(&self.derived_p(x, y, m)) {
                    return Err(violation("Eq (1)", format!("P({x},{y},{m}) differs from Q(.|S=1)")));
                }
            }
        }
        for y in 0..2 {
            for m in 0..self.nm {
                if !self.q_ym(y, m).close(&(self.q_y(y) * self.q_m(m))) {
                    return Err(violation("Eq (2)", format!("Q(y={y}, m={m}) is not Q(y) Q(m)")));
                }
            }
        }
        for y in 0..2 {
            for m in 0..self.nm {
                let qym = self.q_ym(y, m);
                if !(qym > F::zero()) {
                    continue;
                }
                let sel = self.q_ym_selected(y, m);
                if !(sel > F::zero()) {
                    return Err(violation("Eq (3)", format!("Q(S=1 | y={y}, m={m}) = 0")));
                }
                for x in 0..self.nx {
                    // Q(S=1 | x, y, m) = Q(S=1 | y, m), cross-multiplied.
                    let lhs = self.qi(x, y, m, 1).clone() * qym.clone();
                    let rhs = sel.clone() * self.q_xym(x, y, m);
                    if !lhs.close(&rhs) {
                        return Err(violation(
                            "Eq (3)",
                            format!("selection depends on x={x} at y={y}, m={m}"),
                        ));
                    }
                }
            }
        }
        for m in 0..self.nm {
            if !self.p_m(m).close(&self.q_m(m)) {
                return Err(violation("Eq (4)", format!("P(m={m}) differs from Q(m={m})")));
            }
        }
        for y in 0..2 {
            if !self.p_y(y).close(&self.q_y(y)) {
                return Err(violation("Eq (4)", format!("P(y={y}) differs from Q(y={y})")));
            }
        }
        Ok(())
    }

    /// `E_P[w]`.
    pub fn expected_weight(&self) -> F {
        sum(self
            .cells()
            .filter(|&(x, y, m)| self.p_xym(x, y, m) > F::zero())
            .map(|(x, y, m)| self.p_xym(x, y, m) * self.weight(y, m)))
    }
}

/// Validates `joint`, then returns `(Σ_P P w L, Σ_Q Q L)` where the loss of a
/// cell is `loss(f(x & m), y)`.
pub fn theorem1_oracle<F, P, L>(joint: &DiscreteJoint<F>, f: P, loss: L) -> Result<(F, F)>
where
    F: Field,
    P: Fn(usize) -> F,
    L: Fn(&F, usize) -> F,
{
    joint.validate()?;
    let mut lhs = zero::<F>();
    let mut rhs = zero::<F>();
    for (x, y, m) in joint.cells() {
        let l = loss(&f(x & m), y);
        let p = joint.p_xym(x, y, m);
        if p > F::zero() {
            lhs = lhs + p * joint.weight(y, m) * l.clone();
        }
        rhs = rhs + joint.q_xym(x, y, m) * l;
    }
    Ok((lhs, rhs))
}

pub fn squared_loss<F: Field>(pred: &F, y: usize) -> F {
    let d = pred.clone() - F::ratio(y as i64, 1);
    d.clone() * d
}

/// Runs the oracle with squared loss and a fixed predictor table.
pub fn run_oracle<F: Field>(joint: &DiscreteJoint<F>, f_table: &[F]) -> Result<OracleOutcome> {
    let (lhs, rhs) = theorem1_oracle(joint, |v| f_table[v].clone(), squared_loss)?;
    let exact = lhs == rhs;
    Ok(OracleOutcome {
        lhs: lhs.approx(),
        rhs: rhs.approx(),
        expected_weight: joint.expected_weight().approx(),
        exact,
    })
}

/// Builds `Q` from `Q(y)`, `Q(m)`, `Q(x | y, m)` and a selection table
/// `Q(S=1 | y, m)`; then `Y ⊥ M` holds by construction.
pub fn compose_joint<F: Field>(qy: [F; 2], qm: &[F], qx: &[Vec<F>], select: &[[F; 2]]) -> Result<DiscreteJoint<F>> {
    let nm = qm.len();
    let nx = qx.first().map_or(0, Vec::len);
    if qx.len() != 2 * nm || select.len() != nm {
        return Err(Error::Shape("compose_joint tables disagree on sizes".into()));
    }
    let mut q = Vec::with_capacity(nx * 4 * nm);
    for x in 0..nx {
        for (y, py) in qy.iter().enumerate() {
            for m in 0..nm {
                let base = py.clone() * qm[m].clone() * qx[y * nm + m][x].clone();
                let s = select[m][y].clone();
                q.push(base.clone() * (F::one() - s.clone()));
                q.push(base * s);
            }
        }
    }
    DiscreteJoint::new(nx, nm, q)
}

fn normalized<F: Field>(raw: &[i64]) -> Vec<F> {
    let total: i64 = raw.iter().sum();
    raw.iter().map(|&a| F::ratio(a, total)).collect()
}

/// Uniform over `(x, y, m)` in `{0,1}^3` with every sample selected.
pub fn fixture_uniform<F: Field>() -> DiscreteJoint<F> {
    let half = F::ratio(1, 2);
    let qx = vec![vec![half.clone(), half.clone()]; 4];
    compose_joint(
        [half.clone(), half.clone()],
        &[half.clone(), half],
        &qx,
        &[[F::one(), F::one()], [F::one(), F::one()]],
    )
    .expect("fixture sizes agree")
}

/// `2 x 2 x 2` with `Q(S=1 | y, m) = 0.8` if `y = m`, else `0.2`.
pub fn fixture_matched_selection<F: Field>() -> DiscreteJoint<F> {
    let half = F::ratio(1, 2);
    let qx = vec![
        normalized(&[1, 3]),
        normalized(&[2, 1]),
        normalized(&[3, 2]),
        normalized(&[1, 4]),
    ];
    let hi = F::ratio(4, 5);
    let lo = F::ratio(1, 5);
    compose_joint(
        [half.clone(), half.clone()],
        &[half.clone(), half],
        &qx,
        &[[hi.clone(), lo.clone()], [lo, hi]],
    )
    .expect("fixture sizes agree")
}

/// `4 x 2 x 4` with skewed marginals and a mean-preserving selection.
pub fn fixture_wide<F: Field>() -> DiscreteJoint<F> {
    let qy = [F::ratio(1, 3), F::ratio(2, 3)];
    let qm = normalized::<F>(&[1, 2, 3, 4]);
    let qx: Vec<Vec<F>> = (0..8)
        .map(|c| normalized(&(0..4).map(|x| 1 + ((x + c) % 3) as i64).collect::<Vec<_>>()))
        .collect();
    // Σ_m Q(m) δ0(m) = 0 and δ1 = -δ0 Q(y=0)/Q(y=1) keep Q(S|m), Q(S|y) flat.
    let d0 = [F::ratio(1, 5), F::ratio(1, 10), F::ratio(1, 5), F::ratio(-1, 4)];
    let c = F::ratio(1, 2);
    let select: Vec<[F; 2]> = d0
        .iter()
        .map(|d| [c.clone() + d.clone(), c.clone() - d.clone() * F::ratio(1, 2)])
        .collect();
    compose_joint(qy, &qm, &qx, &select).expect("fixture sizes agree")
}

/// Fails the `Eq (2)` check: `Y` depends on `M` in `Q`.
pub fn fixture_dependent_label<F: Field>() -> DiscreteJoint<F> {
    let mut q = Vec::new();
    let qym = [[F::ratio(2, 5), F::ratio(1, 10)], [F::ratio(1, 10), F::ratio(2, 5)]];
    for _x in 0..2 {
        for row in &qym {
            for v in row {
                let half = v.clone() * F::ratio(1, 4);
                q.push(half.clone());
                q.push(half);
            }
        }
    }
    DiscreteJoint::new(2, 2, q).expect("fixture sizes agree")
}

/// A random joint passing every `Eq (n)` check, with `nx, nm ≤ 4`.
pub fn random_joint<F: Field>(seed: u64) -> DiscreteJoint<F> {
    let mut rng = stream(seed, "oracle/joint");
    let nx = rng.gen_range(1..=4);
    let nm = rng.gen_range(1..=4);
    let y0 = rng.gen_range(1..10);
    let qy = [F::ratio(y0, 10), F::ratio(10 - y0, 10)];
    let qm_raw: Vec<i64> = (0..nm).map(|_| rng.gen_range(1..10)).collect();
    let qm = normalized::<F>(&qm_raw);
    let qx: Vec<Vec<F>> = (0..2 * nm)
        .map(|_| normalized(&(0..nx).map(|_| rng.gen_range(1..10)).collect::<Vec<_>>()))
        .collect();
    // Centre a random vector under Q(m), then scale so selection stays in
    // [0.1, 0.9] for both classes.
    let r: Vec<F> = (0..nm).map(|_| F::ratio(rng.gen_range(-9..10), 10)).collect();
    let mean = sum(r.iter().zip(&qm).map(|(a, b)| a.clone() * b.clone()));
    let d0: Vec<F> = r.into_iter().map(|a| a - mean.clone()).collect();
    let ratio = qy[0].clone() / qy[1].clone();
    let mut peak = F::zero();
    for d in &d0 {
        for v in [d.abs(), d.abs() * ratio.clone()] {
            if v > peak {
                peak = v;
            }
        }
    }
    let scale = if peak > F::ratio(1, 1000) {
        F::ratio(2, 5) / peak
    } else {
        F::zero()
    };
    let c = F::ratio(1, 2);
    let select: Vec<[F; 2]> = d0
        .iter()
        .map(|d| {
            let d = d.clone() * scale.clone();
            [c.clone() + d.clone(), c.clone() - d * ratio.clone()]
        })
        .collect();
    compose_joint(qy, &qm, &qx, &select).expect("sizes agree")
}

/// A deterministic predictor table over `x & m` values.
pub fn predictor_table<F: Field>(nx: usize, seed: u64) -> Vec<F> {
    let mut rng = stream(seed, "oracle/predictor");
    (0..nx).map(|_| F::ratio(rng.gen_range(0..=20), 20)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check<F: Field>(j: &DiscreteJoint<F>, seed: u64) {
        let (lhs, rhs) = theorem1_oracle(j, |v| predictor_table::<F>(j.nx, seed)[v].clone(), squared_loss).unwrap();
        assert!(lhs.close(&rhs), "{lhs:?} vs {rhs:?}");
        assert!(j.expected_weight().close(&F::one()));
    }

    #[test]
    fn uniform_fixture_is_exact_with_unit_weights() {
        let j = fixture_uniform::<BigRational>();
        for y in 0..2 {
            for m in 0..2 {
                assert_eq!(j.weight(y, m), BigRational::ratio(1, 1));
            }
        }
        let out = run_oracle(&j, &predictor_table(2, 1)).unwrap();
        assert!(out.exact);
        assert_eq!(out.lhs, out.rhs);
    }

    #[test]
    fn fixtures_hold_in_both_fields() {
        for seed in 0..3 {
            check(&fixture_matched_selection::<f64>(), seed);
            check(&fixture_matched_selection::<BigRational>(), seed);
            check(&fixture_wide::<f64>(), seed);
            check(&fixture_wide::<BigRational>(), seed);
        }
    }

    #[test]
    fn matched_selection_has_nontrivial_weights() {
        let j = fixture_matched_selection::<BigRational>();
        // w = Q(S=1) / Q(S=1|y,m) = 0.5 / 0.8 on the diagonal.
        assert_eq!(j.weight(0, 0), BigRational::ratio(5, 8));
        assert_eq!(j.weight(0, 1), BigRational::ratio(5, 2));
    }

    #[test]
    fn random_joints_validate() {
        for seed in 0..30 {
            let j = random_joint::<BigRational>(seed);
            j.validate().unwrap();
            check(&j, seed);
            check(&random_joint::<f64>(seed), seed);
        }
    }

    #[test]
    fn validator_names_the_equation() {
        let err = fixture_dependent_label::<f64>().validate().unwrap_err();
        assert!(matches!(err, Error::Assumption { tag: "Eq (2)", .. }), "{err}");

        let j = fixture_matched_selection::<BigRational>();
        let mut p: Vec<BigRational> = j.cells().map(|(x, y, m)| j.derived_p(x, y, m)).collect();
        p.swap(0, 1);
        let err = j.clone().with_p(p).unwrap().validate().unwrap_err();
        assert!(matches!(err, Error::Assumption { tag: "Eq (1)", .. }), "{err}");

        // Selection that shifts P(m) away from Q(m).
        let half = BigRational::ratio(1, 2);
        let qx = vec![vec![half.clone(), half.clone()]; 4];
        let s = [
            [BigRational::ratio(9, 10), BigRational::ratio(9, 10)],
            [BigRational::ratio(1, 10), BigRational::ratio(1, 10)],
        ];
        let j = compose_joint([half.clone(), half.clone()], &[half.clone(), half.clone()], &qx, &s).unwrap();
        assert!(matches!(j.validate(), Err(Error::Assumption { tag: "Eq (4)", .. })));

        let s = [
            [BigRational::ratio(0, 1), BigRational::ratio(1, 1)],
            [BigRational::ratio(1, 1), BigRational::ratio(0, 1)],
        ];
        let j = compose_joint([half.clone(), half.clone()], &[half.clone(), half], &qx, &s).unwrap();
        assert!(matches!(j.validate(), Err(Error::Assumption { tag: "Eq (3)", .. })));
    }
}

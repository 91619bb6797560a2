//! Differentiable fuzzy connectives.
//!
//! Every function builds nodes on a [`Graph`] and works elementwise, so the
//! same code evaluates one rule or a `[batch × rules]` matrix of them.
//! Truth values live in `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FuzzyError {
    #[error("invalid fuzzy parameter: {0}")]
    Parameter(String),
    #[error("aggregation over zero truth values")]
    EmptyAggregation,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, FuzzyError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conjunction {
    /// Learnable `σ(αx + βy + γxy + δ)`, folded left over the antecedent.
    Parametric,
    Yager,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Implication {
    Reichenbach,
    SigmoidalReichenbach,
}

/// Operator choice and parameters for rule evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzySemantics {
    pub conjunction: Conjunction,
    pub implication: Implication,
    pub yager_p: f64,
    pub sigmoid_slope: f64,
    /// Softmax-WA temperature.
    pub tau: f64,
    /// Separate temperature for negative-rule aggregation; `None` shares `tau`.
    #[serde(default)]
    pub tau_negative: Option<f64>,
    /// Exponent of the p-mean-error SAT aggregator.
    pub sat_p: f64,
}

impl FuzzySemantics {
    /// Parametric conjunction with Reichenbach implication.
    pub fn v1() -> Self {
        Self {
            conjunction: Conjunction::Parametric,
            implication: Implication::Reichenbach,
            yager_p: 2.0,
            sigmoid_slope: 9.0,
            tau: 1.0,
            tau_negative: None,
            sat_p: 2.0,
        }
    }

    /// Yager t-norm with sigmoidal Reichenbach implication.
    pub fn v2() -> Self {
        Self {
            conjunction: Conjunction::Yager,
            implication: Implication::SigmoidalReichenbach,
            ..Self::v1()
        }
    }

    pub fn negative_tau(&self) -> f64 {
        self.tau_negative.unwrap_or(self.tau)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.yager_p > 0.0) {
            return Err(FuzzyError::Parameter(format!("yager_p must be > 0, got {}", self.yager_p)));
        }
        if !(self.sigmoid_slope > 0.0) {
            return Err(FuzzyError::Parameter(format!(
                "sigmoid_slope must be > 0, got {}",
                self.sigmoid_slope
            )));
        }
        if !(self.sat_p >= 1.0) {
            return Err(FuzzyError::Parameter(format!("sat_p must be ≥ 1, got {}", self.sat_p)));
        }
        if !self.tau.is_finite() || !self.negative_tau().is_finite() {
            return Err(FuzzyError::Parameter("tau must be finite".into()));
        }
        Ok(())
    }
}

impl Default for FuzzySemantics {
    fn default() -> Self {
        Self::v1()
    }
}

/// Values of the parametric connector `σ(αx + βy + γxy + δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for ConnectorParams {
    /// Product-like at init: `(1,1) → σ(1)`, `(0,0) → σ(−2)`.
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: -2.0,
        }
    }
}

impl ConnectorParams {
    pub fn to_array(self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            alpha: v[0],
            beta: v[1],
            gamma: v[2],
            delta: v[3],
        }
    }
}

/// Connector parameters as graph nodes. Each is either a scalar (shared by
/// all rules) or has the shape of the operands (one value per rule).
#[derive(Clone, Copy, Debug)]
pub struct ConnectorVars {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub delta: Var,
}

impl ConnectorVars {
    /// Shared learnable scalars.
    pub fn params(g: &mut Graph, p: ConnectorParams) -> Self {
        Self {
            alpha: g.param(Tensor::scalar(p.alpha)),
            beta: g.param(Tensor::scalar(p.beta)),
            gamma: g.param(Tensor::scalar(p.gamma)),
            delta: g.param(Tensor::scalar(p.delta)),
        }
    }

    /// Shared fixed scalars.
    pub fn constants(g: &mut Graph, p: ConnectorParams) -> Self {
        Self {
            alpha: g.scalar(p.alpha),
            beta: g.scalar(p.beta),
            gamma: g.scalar(p.gamma),
            delta: g.scalar(p.delta),
        }
    }

    pub fn as_array(&self) -> [Var; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }
}

/// `σ(αx + βy + γ·x·y + δ)`.
pub fn conj_parametric(g: &mut Graph, x: Var, y: Var, c: &ConnectorVars) -> Result<Var> {
    let ax = g.mul(c.alpha, x)?;
    let by = g.mul(c.beta, y)?;
    let xy = g.mul(x, y)?;
    let gxy = g.mul(c.gamma, xy)?;
    let s = g.add(ax, by)?;
    let s = g.add(s, gxy)?;
    let s = g.add(s, c.delta)?;
    Ok(g.sigmoid(s)?)
}

/// Left fold of [`conj_parametric`]: `A(A(a₀, a₁), a₂)…`. A single input is
/// returned unchanged.
pub fn conj_parametric_fold(g: &mut Graph, inputs: &[Var], c: &ConnectorVars) -> Result<Var> {
    let (&first, rest) = inputs.split_first().ok_or(FuzzyError::EmptyAggregation)?;
    rest.iter()
        .try_fold(first, |acc, &x| conj_parametric(g, acc, x, c))
}

/// n-ary Yager t-norm `max(0, 1 − (Σᵢ (1 − aᵢ)^p)^{1/p})`.
pub fn conj_yager(g: &mut Graph, inputs: &[Var], p: f64) -> Result<Var> {
    if !(p > 0.0) {
        return Err(FuzzyError::Parameter(format!("yager_p must be > 0, got {p}")));
    }
    let mut total: Option<Var> = None;
    for &a in inputs {
        let comp = g.one_minus(a)?;
        let comp = g.clamp(comp, 0.0, 1.0)?;
        let term = g.pow(comp, p)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.ok_or(FuzzyError::EmptyAggregation)?;
    let root = g.pow(total, 1.0 / p)?;
    let t = g.one_minus(root)?;
    Ok(g.relu(t)?)
}

/// Conjunction of several truth nodes under the given semantics.
pub fn conjoin(
    g: &mut Graph,
    inputs: &[Var],
    semantics: &FuzzySemantics,
    connector: &ConnectorVars,
) -> Result<Var> {
    match semantics.conjunction {
        Conjunction::Parametric => conj_parametric_fold(g, inputs, connector),
        Conjunction::Yager => conj_yager(g, inputs, semantics.yager_p),
    }
}

/// Reichenbach implication `1 − a + a·c`.
pub fn impl_reichenbach(g: &mut Graph, a: Var, c: Var) -> Result<Var> {
    let ac = g.mul(a, c)?;
    let na = g.one_minus(a)?;
    Ok(g.add(na, ac)?)
}

/// Endpoint-normalized sigmoid `((1 + e^{s/2})·σ(s(I − ½)) − 1) / (e^{s/2} − 1)`.
pub fn sigmoidal_transform(g: &mut Graph, truth: Var, s: f64) -> Result<Var> {
    if !(s > 0.0) {
        return Err(FuzzyError::Parameter(format!("sigmoid slope must be > 0, got {s}")));
    }
    let e = (s / 2.0).exp();
    let x = g.offset(truth, -0.5)?;
    let x = g.scale(x, s)?;
    let x = g.sigmoid(x)?;
    let x = g.scale(x, 1.0 + e)?;
    let x = g.offset(x, -1.0)?;
    Ok(g.scale(x, 1.0 / (e - 1.0))?)
}

pub fn impl_sigmoidal_reichenbach(g: &mut Graph, a: Var, c: Var, s: f64) -> Result<Var> {
    let i = impl_reichenbach(g, a, c)?;
    sigmoidal_transform(g, i, s)
}

pub fn implies(g: &mut Graph, a: Var, c: Var, semantics: &FuzzySemantics) -> Result<Var> {
    match semantics.implication {
        Implication::Reichenbach => impl_reichenbach(g, a, c),
        Implication::SigmoidalReichenbach => {
            impl_sigmoidal_reichenbach(g, a, c, semantics.sigmoid_slope)
        }
    }
}

/// Softmax-weighted average `Σᵢ softmax(τ·t)ᵢ · tᵢ`, row by row.
///
/// A `[rows × n]` input gives `[rows × 1]`; a vector gives a one-element
/// vector.
pub fn agg_softmax_wa(g: &mut Graph, truths: Var, tau: f64) -> Result<Var> {
    if g.value(truths).cols() == 0 || g.value(truths).numel() == 0 {
        return Err(FuzzyError::EmptyAggregation);
    }
    let w = g.softmax_rows(truths, tau)?;
    let wt = g.mul(w, truths)?;
    Ok(g.sum_rows(wt)?)
}

/// p-mean-error satisfiability `1 − (meanᵢ (1 − tᵢ)^p)^{1/p}` over all
/// entries.
pub fn agg_sat_pmean(g: &mut Graph, truths: Var, p: f64) -> Result<Var> {
    let n = g.value(truths).numel();
    if n == 0 {
        return Err(FuzzyError::EmptyAggregation);
    }
    let mean_err = mean_error(g, truths, p, None)?;
    let root = g.pow(mean_err, 1.0 / p)?;
    Ok(g.one_minus(root)?)
}

/// `mean((1 − t)^p)` over the entries selected by `mask` (all if `None`).
/// The mask must hold 0/1 values with at least one 1.
pub fn mean_error(g: &mut Graph, truths: Var, p: f64, mask: Option<&Tensor>) -> Result<Var> {
    if !(p >= 1.0) {
        return Err(FuzzyError::Parameter(format!("sat_p must be ≥ 1, got {p}")));
    }
    let err = g.one_minus(truths)?;
    let err = g.clamp(err, 0.0, 1.0)?;
    let err = g.pow(err, p)?;
    match mask {
        None => Ok(g.mean(err)?),
        Some(m) => {
            let count: f64 = m.data().iter().sum();
            if count == 0.0 {
                return Err(FuzzyError::EmptyAggregation);
            }
            let mv = g.constant(m.clone());
            let masked = g.mul(err, mv)?;
            let total = g.sum(masked)?;
            Ok(g.scale(total, 1.0 / count)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;

    fn eval1(f: impl Fn(&mut Graph, Var) -> Result<Var>, x: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(x));
        let out = f(&mut g, v).unwrap();
        g.value(out).item().unwrap()
    }

    fn eval2(f: impl Fn(&mut Graph, Var, Var) -> Result<Var>, x: f64, y: f64) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(x));
        let b = g.constant(Tensor::scalar(y));
        let out = f(&mut g, a, b).unwrap();
        g.value(out).item().unwrap()
    }

    fn parametric(x: f64, y: f64, p: ConnectorParams) -> f64 {
        eval2(
            |g, a, b| {
                let c = ConnectorVars::constants(g, p);
                conj_parametric(g, a, b, &c)
            },
            x,
            y,
        )
    }

    fn yager(values: &[f64], p: f64) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let out = conj_yager(&mut g, &vars, p).unwrap();
        g.value(out).item().unwrap()
    }

    fn softmax_wa(t: &[f64], tau: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(t.to_vec()));
        let out = agg_softmax_wa(&mut g, v, tau).unwrap();
        g.value(out).item().unwrap()
    }

    fn sat(t: &[f64], p: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(t.to_vec()));
        let out = agg_sat_pmean(&mut g, v, p).unwrap();
        g.value(out).item().unwrap()
    }

    #[test]
    fn parametric_connector_values() {
        let zero = ConnectorParams::from_array([0.0; 4]);
        assert_eq!(parametric(0.3, 0.9, zero), 0.5);
        let sharp = ConnectorParams::from_array([6.0, 6.0, 0.0, -9.0]);
        assert!((parametric(1.0, 1.0, sharp) - sigmoid(3.0)).abs() < 1e-15);
        assert!((parametric(1.0, 1.0, sharp) - 0.952_574_126_822_433_4).abs() < 1e-12);
        assert!((parametric(0.0, 0.0, sharp) - 1.233_945_759_862_318_6e-4).abs() < 1e-15);
        let init = ConnectorParams::default();
        assert!((parametric(1.0, 1.0, init) - sigmoid(1.0)).abs() < 1e-15);
        assert!((parametric(0.0, 0.0, init) - sigmoid(-2.0)).abs() < 1e-15);
    }

    #[test]
    fn parametric_fold_is_left_associative() {
        let p = ConnectorParams::from_array([2.0, 1.0, 0.5, -1.0]);
        let mut g = Graph::new();
        let xs: Vec<Var> = [0.2, 0.7, 0.9]
            .iter()
            .map(|&v| g.constant(Tensor::scalar(v)))
            .collect();
        let c = ConnectorVars::constants(&mut g, p);
        let folded = conj_parametric_fold(&mut g, &xs, &c).unwrap();
        let inner = parametric(0.2, 0.7, p);
        let expected = parametric(inner, 0.9, p);
        assert!((g.value(folded).item().unwrap() - expected).abs() < 1e-15);
        let single = conj_parametric_fold(&mut g, &xs[..1], &c).unwrap();
        assert_eq!(g.value(single).item(), Some(0.2));
    }

    #[test]
    fn yager_identities() {
        for p in [0.5, 1.0, 2.0, 5.0] {
            for x in [0.0, 0.13, 0.5, 0.77, 1.0] {
                assert!((yager(&[1.0, x], p) - x).abs() < 1e-12, "T(1,{x}) p={p}");
                assert_eq!(yager(&[0.0, x], p), 0.0);
            }
        }
        assert!((yager(&[0.5, 0.5], 2.0) - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!((yager(&[0.5, 0.5], 2.0) - 0.292_893_218_813_452_4).abs() < 1e-12);
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.5));
        assert!(matches!(
            conj_yager(&mut g, &[x, x], 0.0),
            Err(FuzzyError::Parameter(_))
        ));
    }

    #[test]
    fn reichenbach_values() {
        let r = |a, c| eval2(impl_reichenbach, a, c);
        for c in [0.0, 0.3, 1.0] {
            assert_eq!(r(0.0, c), 1.0);
        }
        assert_eq!(r(1.0, 0.0), 0.0);
        assert_eq!(r(0.5, 0.5), 0.75);
    }

    #[test]
    fn sigmoidal_transform_fixed_points() {
        for s in [0.5, 1.0, 9.0, 30.0] {
            let t = |i| eval1(|g, v| sigmoidal_transform(g, v, s), i);
            assert!(t(0.0).abs() < 1e-12, "s={s}");
            assert!((t(1.0) - 1.0).abs() < 1e-12, "s={s}");
            assert!((t(0.5) - 0.5).abs() < 1e-12, "s={s}");
        }
        let t9 = |i| eval1(|g, v| sigmoidal_transform(g, v, 9.0), i);
        assert!(t9(0.3) < t9(0.7));
        // Direct evaluation of the closed form.
        let e = 4.5f64.exp();
        let direct = ((1.0 + e) * sigmoid(9.0 * (0.3 - 0.5)) - 1.0) / (e - 1.0);
        assert!((t9(0.3) - direct).abs() < 1e-15);
        assert!((t9(0.3) - 0.133_804_323_113_440_04).abs() < 1e-12);
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(0.5));
        assert!(sigmoidal_transform(&mut g, v, 0.0).is_err());
    }

    #[test]
    fn softmax_wa_values() {
        let t = [0.2, 0.9, 0.4, 0.65];
        let mean = t.iter().sum::<f64>() / 4.0;
        assert!((softmax_wa(&t, 0.0) - mean).abs() < 1e-12);
        for tau in [-3.0, 0.0, 1.0, 50.0] {
            assert!((softmax_wa(&[0.37; 5], tau) - 0.37).abs() < 1e-12);
        }
        assert!((softmax_wa(&[0.1, 0.9], 50.0) - 0.9).abs() < 1e-3);
        let mut g = Graph::new();
        let empty = g.constant(Tensor::vector(vec![]));
        assert_eq!(
            agg_softmax_wa(&mut g, empty, 1.0),
            Err(FuzzyError::EmptyAggregation)
        );
    }

    #[test]
    fn softmax_wa_rowwise() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::from_rows(&[vec![0.2, 0.4], vec![1.0, 1.0]]).unwrap());
        let out = agg_softmax_wa(&mut g, m, 0.0).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        let d = g.value(out).data();
        assert!((d[0] - 0.3).abs() < 1e-15);
        assert!((d[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sat_values() {
        assert_eq!(sat(&[1.0, 1.0, 1.0], 2.0), 1.0);
        assert_eq!(sat(&[0.0, 0.0], 2.0), 0.0);
        assert!((sat(&[1.0, 0.0], 2.0) - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!((sat(&[0.6, 0.8], 1.0) - 0.7).abs() < 1e-12);
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![0.5]));
        assert!(agg_sat_pmean(&mut g, v, 0.5).is_err());
    }

    #[test]
    fn semantics_presets() {
        let v2 = FuzzySemantics::v2();
        assert_eq!(v2.conjunction, Conjunction::Yager);
        assert_eq!(v2.implication, Implication::SigmoidalReichenbach);
        assert_eq!(v2.yager_p, 2.0);
        assert_eq!(v2.sigmoid_slope, 9.0);
        v2.check().unwrap();
        let bad = FuzzySemantics {
            sat_p: 0.5,
            ..FuzzySemantics::v1()
        };
        assert!(bad.check().is_err());
        let json = serde_json::to_string(&FuzzySemantics::v1()).unwrap();
        assert!(json.contains(r#""conjunction":"parametric""#));
        assert!(json.contains(r#""implication":"reichenbach""#));
    }
}

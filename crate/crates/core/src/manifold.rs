//! Chart-based Lorentzian manifolds: metric, connection, causal structure and
//! quotient identifications by affine deck groups.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Band for calling a vector null: `|g(v,v)| <= NULL_TOL * |v|_h^2`, with `h`
/// the chart-Euclidean auxiliary metric.
pub const NULL_TOL: f64 = 1e-10;

/// Step for central differences of metric entries.
pub const METRIC_FD_STEP: f64 = 1e-6;

/// Step for central differences of Christoffel symbols.
pub const CHRISTOFFEL_FD_STEP: f64 = 1e-5;

const WARPED_X_MAX: f64 = 50.0;
const ADS2_S_MAX: f64 = 20.0;

/// Euclidean norm in chart components (the auxiliary Riemannian metric).
pub fn aux_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A tangent vector: base point in chart coordinates plus components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVec {
    pub base: Vec<f64>,
    pub comp: Vec<f64>,
}

impl TangentVec {
    pub fn new(base: impl Into<Vec<f64>>, comp: impl Into<Vec<f64>>) -> Self {
        TangentVec {
            base: base.into(),
            comp: comp.into(),
        }
    }

    pub fn scaled(&self, c: f64) -> TangentVec {
        TangentVec {
            base: self.base.clone(),
            comp: self.comp.iter().map(|x| c * x).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.iter().chain(&self.comp).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Character {
    Timelike,
    Null,
    Spacelike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Future,
    Past,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Causal {
    pub character: Character,
    pub orientation: Orientation,
}

impl Causal {
    pub fn is_timelike(&self) -> bool {
        self.character == Character::Timelike
    }

    pub fn is_causal(&self) -> bool {
        self.character != Character::Spacelike
    }
}

/// Conformal factor profiles for the warped cylinder `Ω(x)² (−dt² + dx²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "omega", rename_all = "snake_case")]
pub enum WarpProfile {
    Cosh,
    OnePlusEpsX2 { eps: f64 },
}

impl WarpProfile {
    /// Returns `(Ω, Ω', Ω'')` at `x`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            WarpProfile::Cosh => (x.cosh(), x.sinh(), x.cosh()),
            WarpProfile::OnePlusEpsX2 { eps } => (1.0 + eps * x * x, 2.0 * eps * x, 2.0 * eps),
        }
    }
}

/// User metric evaluated pointwise; connection by finite differences.
pub struct CustomMetric {
    pub dim: usize,
    pub metric: Box<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    pub orientation: Vec<f64>,
}

#[derive(Clone)]
pub enum Geometry {
    /// Constant metric (Minkowski unless configured otherwise).
    Flat {
        metric: DMatrix<f64>,
        orientation: Vec<f64>,
    },
    /// `Ω(x)² (−dt² + dx²)` in chart `(t, x)`.
    Warped { profile: WarpProfile },
    /// The one-sheeted hyperboloid in chart `(θ, s)`, `g = −cosh²s dθ² + ds²`,
    /// with `θ` an angle.
    Ads2,
    Custom(Arc<CustomMetric>),
}

impl fmt::Debug for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Geometry::Flat { metric, .. } => write!(f, "Flat({metric:?})"),
            Geometry::Warped { profile } => write!(f, "Warped({profile:?})"),
            Geometry::Ads2 => write!(f, "Ads2"),
            Geometry::Custom(c) => write!(f, "Custom(dim={})", c.dim),
        }
    }
}

/// An affine chart map `x ↦ A·x + b`, acting on components by `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeckElement {
    pub label: String,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl DeckElement {
    pub fn identity(n: usize) -> Self {
        DeckElement {
            label: "identity".into(),
            a: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
            b: vec![0.0; n],
        }
    }

    pub fn translation(label: impl Into<String>, b: Vec<f64>) -> Self {
        let mut d = DeckElement::identity(b.len());
        d.label = label.into();
        d.b = b;
        d
    }

    pub fn from_parts(label: impl Into<String>, a: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        DeckElement {
            label: label.into(),
            a: (0..a.nrows())
                .map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect())
                .collect(),
            b: b.iter().copied().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.a[i][j])
    }

    pub fn shift(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.b)
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.a[i].iter().zip(p).map(|(a, x)| a * x).sum::<f64>() + self.b[i])
            .collect()
    }

    /// Differential of the map, acting on vector components.
    pub fn push(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.a[i].iter().zip(v).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &DeckElement) -> DeckElement {
        let a = self.matrix() * other.matrix();
        let b = self.matrix() * other.shift() + self.shift();
        DeckElement::from_parts(format!("{}*{}", self.label, other.label), &a, &b)
    }

    pub fn inverse(&self) -> Result<DeckElement> {
        let ainv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::config(format!("deck element {} is not invertible", self.label)))?;
        let b = -(&ainv * self.shift());
        Ok(DeckElement::from_parts(format!("{}^-1", self.label), &ainv, &b))
    }

    /// Exact comparison with the identity map.
    pub fn is_identity(&self) -> bool {
        let n = self.dim();
        self.b.iter().all(|&x| x == 0.0)
            && (0..n).all(|i| (0..n).all(|j| self.a[i][j] == if i == j { 1.0 } else { 0.0 }))
    }

    pub fn is_translation(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| self.a[i][j] == if i == j { 1.0 } else { 0.0 }))
    }

    fn validate_shape(&self, n: usize) -> Result<()> {
        if self.b.len() != n || self.a.len() != n || self.a.iter().any(|r| r.len() != n) {
            return Err(Error::config(format!(
                "deck element {}: expected A {n}x{n} and b of length {n}",
                self.label
            )));
        }
        if self.b.iter().chain(self.a.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::config(format!("deck element {}: non-finite entry", self.label)));
        }
        Ok(())
    }
}

/// Fundamental domain rule for quotient charts.
#[derive(Debug, Clone)]
enum FundamentalDomain {
    /// Parallelepiped spanned by independent translation generators: the
    /// coordinates along the lattice basis are reduced into `[0, 1)`.
    TranslationLattice {
        basis: DMatrix<f64>,
        pinv: DMatrix<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct DeckGroup {
    generators: Vec<DeckElement>,
    word_bound: usize,
    domain: Option<FundamentalDomain>,
}

impl DeckGroup {
    pub fn new(generators: Vec<DeckElement>, word_bound: usize) -> Result<Self> {
        if generators.is_empty() {
            return Err(Error::config("deck group needs at least one generator"));
        }
        let n = generators[0].dim();
        for g in &generators {
            g.validate_shape(n)?;
            if g.label.is_empty() || g.label.contains(['*', '^']) || g.label == "identity" {
                return Err(Error::config(format!("invalid generator name {:?}", g.label)));
            }
        }
        let domain = if generators.iter().all(|g| g.is_translation()) {
            let basis = DMatrix::from_fn(n, generators.len(), |i, j| generators[j].b[i]);
            let gram = basis.transpose() * &basis;
            gram.try_inverse().and_then(|gi| {
                if gi.iter().all(|x| x.is_finite()) && generators.len() <= n {
                    Some(FundamentalDomain::TranslationLattice {
                        pinv: gi * basis.transpose(),
                        basis,
                    })
                } else {
                    None
                }
            })
        } else {
            None
        };
        Ok(DeckGroup {
            generators,
            word_bound: word_bound.max(1),
            domain,
        })
    }

    pub fn generators(&self) -> &[DeckElement] {
        &self.generators
    }

    pub fn word_bound(&self) -> usize {
        self.word_bound
    }

    fn generator(&self, name: &str) -> Option<&DeckElement> {
        self.generators.iter().find(|g| g.label == name)
    }
}

/// Parses `"identity"`, `"T"`, `"T^2"`, `"g0*g1^-1"` into `(name, power)` pairs.
pub fn parse_word(label: &str) -> Result<Vec<(String, i64)>> {
    let label = label.trim();
    if label.is_empty() || label == "identity" || label == "e" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for tok in label.split('*') {
        let tok = tok.trim();
        let (name, pow) = match tok.split_once('^') {
            Some((n, p)) => (
                n.trim(),
                p.trim()
                    .parse::<i64>()
                    .map_err(|_| Error::config(format!("bad exponent in deck word {label:?}")))?,
            ),
            None => (tok, 1),
        };
        if name.is_empty() {
            return Err(Error::config(format!("empty generator in deck word {label:?}")));
        }
        if pow != 0 {
            out.push((name.to_string(), pow));
        }
    }
    Ok(out)
}

fn format_word(word: &[(String, i64)]) -> String {
    if word.is_empty() {
        return "identity".into();
    }
    word.iter()
        .map(|(n, p)| if *p == 1 { n.clone() } else { format!("{n}^{p}") })
        .collect::<Vec<_>>()
        .join("*")
}

/// The single source of geometric truth for every computation.
#[derive(Debug, Clone)]
pub struct SpacetimeModel {
    name: String,
    dim: usize,
    geometry: Geometry,
    deck: Option<DeckGroup>,
    periods: Vec<Option<f64>>,
}

impl SpacetimeModel {
    pub fn minkowski(dim: usize) -> Self {
        let mut metric = DMatrix::identity(dim, dim);
        metric[(0, 0)] = -1.0;
        let mut orientation = vec![0.0; dim];
        orientation[0] = 1.0;
        SpacetimeModel {
            name: if dim == 2 { "minkowski2".into() } else { format!("minkowski{dim}") },
            dim,
            geometry: Geometry::Flat { metric, orientation },
            deck: None,
            periods: vec![None; dim],
        }
    }

    /// Minkowski plane with `(t, x) ∼ (t + period, x)`.
    pub fn cylinder(period: f64) -> Self {
        let mut m = Self::minkowski(2);
        m.name = "cylinder".into();
        m.deck = Some(
            DeckGroup::new(vec![DeckElement::translation("T", vec![period, 0.0])], 2)
                .expect("translation generator"),
        );
        m
    }

    /// `Ω(x)² (−dt² + dx²)` with `(t, x) ∼ (t + period, x)`.
    pub fn warped_cylinder(profile: WarpProfile, period: f64) -> Self {
        SpacetimeModel {
            name: "warped_cylinder".into(),
            dim: 2,
            geometry: Geometry::Warped { profile },
            deck: Some(
                DeckGroup::new(vec![DeckElement::translation("T", vec![period, 0.0])], 2)
                    .expect("translation generator"),
            ),
            periods: vec![None; 2],
        }
    }

    pub fn ads2() -> Self {
        SpacetimeModel {
            name: "ads2".into(),
            dim: 2,
            geometry: Geometry::Ads2,
            deck: None,
            periods: vec![Some(2.0 * PI), None],
        }
    }

    /// A flat quotient of a constant-metric chart by affine generators.
    pub fn flat_quotient(
        metric: DMatrix<f64>,
        orientation: Vec<f64>,
        generators: Vec<DeckElement>,
        word_bound: usize,
    ) -> Result<Self> {
        let dim = metric.nrows();
        if dim < 2 || metric.ncols() != dim || orientation.len() != dim {
            return Err(Error::config("flat_quotient: metric must be n×n (n ≥ 2) with matching orientation"));
        }
        let deck = DeckGroup::new(generators, word_bound)?;
        if deck.generators[0].dim() != dim {
            return Err(Error::config("flat_quotient: generator dimension differs from metric"));
        }
        Ok(SpacetimeModel {
            name: "flat_quotient".into(),
            dim,
            geometry: Geometry::Flat { metric, orientation },
            deck: Some(deck),
            periods: vec![None; dim],
        })
    }

    /// Model from a pointwise metric; the connection is obtained by central differences.
    pub fn custom(name: impl Into<String>, custom: CustomMetric) -> Self {
        let dim = custom.dim;
        SpacetimeModel {
            name: name.into(),
            dim,
            geometry: Geometry::Custom(Arc::new(custom)),
            deck: None,
            periods: vec![None; dim],
        }
    }

    pub fn with_deck(mut self, deck: DeckGroup) -> Self {
        self.deck = Some(deck);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn deck_group(&self) -> Option<&DeckGroup> {
        self.deck.as_ref()
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.geometry, Geometry::Flat { .. })
    }

    pub fn periods(&self) -> &[Option<f64>] {
        &self.periods
    }

    pub fn in_domain(&self, p: &[f64]) -> bool {
        if p.len() != self.dim || !p.iter().all(|x| x.is_finite()) {
            return false;
        }
        match &self.geometry {
            Geometry::Flat { .. } | Geometry::Custom(_) => true,
            Geometry::Warped { profile } => p[1].abs() < WARPED_X_MAX && profile.eval(p[1]).0 > 0.0,
            Geometry::Ads2 => p[1].abs() < ADS2_S_MAX,
        }
    }

    pub fn check_domain(&self, p: &[f64]) -> Result<()> {
        if self.in_domain(p) {
            Ok(())
        } else {
            Err(Error::Domain {
                model: self.name.clone(),
                point: p.to_vec(),
            })
        }
    }

    pub(crate) fn metric_unchecked(&self, p: &[f64]) -> DMatrix<f64> {
        match &self.geometry {
            Geometry::Flat { metric, .. } => metric.clone(),
            Geometry::Warped { profile } => {
                let om = profile.eval(p[1]).0;
                let o2 = om * om;
                DMatrix::from_row_slice(2, 2, &[-o2, 0.0, 0.0, o2])
            }
            Geometry::Ads2 => {
                let c = p[1].cosh();
                DMatrix::from_row_slice(2, 2, &[-c * c, 0.0, 0.0, 1.0])
            }
            Geometry::Custom(c) => (c.metric)(p),
        }
    }

    pub fn metric_at(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        self.check_domain(p)?;
        Ok(self.metric_unchecked(p))
    }

    pub(crate) fn inner_unchecked(&self, p: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let g = self.metric_unchecked(p);
        let n = self.dim;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += g[(i, j)] * a[i] * b[j];
            }
        }
        acc
    }

    pub fn inner(&self, p: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_domain(p)?;
        Ok(self.inner_unchecked(p, a, b))
    }

    /// Reference future-timelike vector at `p`.
    pub fn time_orientation(&self, p: &[f64]) -> Vec<f64> {
        match &self.geometry {
            Geometry::Flat { orientation, .. } => orientation.clone(),
            Geometry::Custom(c) => c.orientation.clone(),
            Geometry::Warped { .. } | Geometry::Ads2 => {
                let _ = p;
                vec![1.0, 0.0]
            }
        }
    }

    /// Christoffel symbols `Γ^a_{bc}` stored at `a·n² + b·n + c`.
    pub fn christoffel_into(&self, p: &[f64], out: &mut [f64]) {
        let n = self.dim;
        match &self.geometry {
            Geometry::Flat { .. } => out.fill(0.0),
            Geometry::Warped { profile } => {
                out.fill(0.0);
                let (om, dom, _) = profile.eval(p[1]);
                let h = dom / om;
                // t = 0, x = 1
                out[1] = h; // Γ^t_tx
                out[2] = h; // Γ^t_xt
                out[n * n] = h; // Γ^x_tt
                out[n * n + 3] = h; // Γ^x_xx
            }
            Geometry::Ads2 => {
                out.fill(0.0);
                let s = p[1];
                let th = s.tanh();
                out[1] = th; // Γ^θ_θs
                out[2] = th; // Γ^θ_sθ
                out[4] = s.sinh() * s.cosh(); // Γ^s_θθ
            }
            Geometry::Custom(_) => christoffel_fd(|q| self.metric_unchecked(q), p, out),
        }
    }

    /// Derivatives `∂_d Γ^a_{bc}` stored at `((a·n + b)·n + c)·n + d`.
    pub fn christoffel_deriv_into(&self, p: &[f64], out: &mut [f64]) {
        let n = self.dim;
        match &self.geometry {
            Geometry::Flat { .. } => out.fill(0.0),
            Geometry::Warped { profile } => {
                out.fill(0.0);
                let (om, dom, ddom) = profile.eval(p[1]);
                let h = dom / om;
                let dh = ddom / om - h * h;
                let idx = |a: usize, b: usize, c: usize| ((a * n + b) * n + c) * n + 1;
                out[idx(0, 0, 1)] = dh;
                out[idx(0, 1, 0)] = dh;
                out[idx(1, 0, 0)] = dh;
                out[idx(1, 1, 1)] = dh;
            }
            Geometry::Ads2 => {
                out.fill(0.0);
                let s = p[1];
                let sech = 1.0 / s.cosh();
                let idx = |a: usize, b: usize, c: usize| ((a * n + b) * n + c) * n + 1;
                out[idx(0, 0, 1)] = sech * sech;
                out[idx(0, 1, 0)] = sech * sech;
                out[idx(1, 0, 0)] = (2.0 * s).cosh();
            }
            Geometry::Custom(_) => christoffel_deriv_fd(self, p, out),
        }
    }

    pub fn christoffel(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(p)?;
        let mut out = vec![0.0; self.dim.pow(3)];
        self.christoffel_into(p, &mut out);
        Ok(out)
    }

    /// Causal character and time orientation of `v`.
    pub fn classify(&self, v: &TangentVec) -> Result<Causal> {
        self.check_tangent(v)?;
        let gvv = self.inner_unchecked(&v.base, &v.comp, &v.comp);
        let h2 = v.comp.iter().map(|x| x * x).sum::<f64>();
        if h2 == 0.0 {
            return Ok(Causal {
                character: Character::Spacelike,
                orientation: Orientation::None,
            });
        }
        let character = if gvv.abs() <= NULL_TOL * h2 {
            Character::Null
        } else if gvv < 0.0 {
            Character::Timelike
        } else {
            Character::Spacelike
        };
        let orientation = if character == Character::Spacelike {
            Orientation::None
        } else {
            let tau = self.time_orientation(&v.base);
            if self.inner_unchecked(&v.base, &v.comp, &tau) < 0.0 {
                Orientation::Future
            } else {
                Orientation::Past
            }
        };
        Ok(Causal {
            character,
            orientation,
        })
    }

    /// `√|g(v,v)|`.
    pub fn norm(&self, v: &TangentVec) -> f64 {
        if v.comp.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        self.inner_unchecked(&v.base, &v.comp, &v.comp).abs().sqrt()
    }

    pub fn check_tangent(&self, v: &TangentVec) -> Result<()> {
        if v.base.len() != self.dim || v.comp.len() != self.dim {
            return Err(Error::config(format!(
                "expected {}-dimensional base and components",
                self.dim
            )));
        }
        if !v.comp.iter().all(|x| x.is_finite()) {
            return Err(Error::config("non-finite vector components"));
        }
        self.check_domain(&v.base)
    }

    /// `a − b` in chart coordinates, with angular coordinates wrapped into `(−P/2, P/2]`.
    pub fn chart_delta(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .zip(&self.periods)
            .map(|((x, y), per)| {
                let d = x - y;
                match per {
                    Some(p) => d - p * (d / p).round(),
                    None => d,
                }
            })
            .collect()
    }

    /// Representative of `p`'s orbit in the fundamental domain.
    pub fn canonicalize(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(p)?;
        let has_periods = self.periods.iter().any(Option::is_some);
        let mut out = p.to_vec();
        match &self.deck {
            Some(deck) => match &deck.domain {
                Some(FundamentalDomain::TranslationLattice { basis, pinv }) => {
                    let x = DVector::from_column_slice(p);
                    let c = pinv * &x;
                    let shift = basis * c.map(f64::floor);
                    out = (x - shift).iter().copied().collect();
                    // floor of a value in [0,1) can round to 1 after subtraction
                    let c2 = pinv * DVector::from_column_slice(&out);
                    if c2.iter().any(|&ci| !(0.0..1.0).contains(&ci)) {
                        let fix = basis * c2.map(f64::floor);
                        out = (DVector::from_column_slice(&out) - fix).iter().copied().collect();
                    }
                }
                None => {
                    return Err(Error::config(format!(
                        "{}: deck group has no fundamental-domain rule",
                        self.name
                    )))
                }
            },
            None if !has_periods => {
                return Err(Error::config(format!("{} has no deck group", self.name)))
            }
            None => {}
        }
        for (x, per) in out.iter_mut().zip(&self.periods) {
            if let Some(pp) = per {
                *x = x.rem_euclid(*pp);
                if *x >= *pp {
                    *x -= pp;
                }
            }
        }
        Ok(out)
    }

    /// Resolves a deck word such as `"T^2"` against the generators.
    pub fn deck_element(&self, label: &str) -> Result<DeckElement> {
        let word = parse_word(label)?;
        let mut acc = DeckElement::identity(self.dim);
        if word.is_empty() {
            return Ok(acc);
        }
        let deck = self
            .deck
            .as_ref()
            .ok_or_else(|| Error::config(format!("{} has no deck group; unknown label {label:?}", self.name)))?;
        for (name, pow) in &word {
            let g = deck
                .generator(name)
                .ok_or_else(|| Error::config(format!("unknown deck generator {name:?}")))?;
            let g = if *pow < 0 { g.inverse()? } else { g.clone() };
            for _ in 0..pow.unsigned_abs() {
                acc = acc.compose(&g);
            }
        }
        acc.label = format_word(&word);
        Ok(acc)
    }

    /// Classes available for loop searches: reduced generator words up to the
    /// word-length bound, or the identity class on angular charts.
    pub fn loop_classes(&self) -> Vec<DeckElement> {
        let mut out = Vec::new();
        if self.periods.iter().any(Option::is_some) {
            out.push(DeckElement::identity(self.dim));
        }
        if let Some(deck) = &self.deck {
            let letters: Vec<(String, i64)> = deck
                .generators
                .iter()
                .flat_map(|g| [(g.label.clone(), 1), (g.label.clone(), -1)])
                .collect();
            let mut frontier: Vec<Vec<(String, i64)>> = vec![Vec::new()];
            for _ in 0..deck.word_bound {
                let mut next = Vec::new();
                for w in &frontier {
                    for l in &letters {
                        if let Some(last) = w.last() {
                            if last.0 == l.0 && last.1 == -l.1 {
                                continue;
                            }
                        }
                        let mut w2 = w.clone();
                        w2.push(l.clone());
                        next.push(w2);
                    }
                }
                for w in &next {
                    let label = format_word(&compress(w));
                    if let Ok(d) = self.deck_element(&label) {
                        if !out.iter().any(|o: &DeckElement| o.label == d.label) {
                            out.push(d);
                        }
                    }
                }
                frontier = next;
            }
        }
        out
    }

    /// Checks that `deck` preserves the metric at `samples` random chart points.
    pub fn check_isometry(&self, deck: &DeckElement, samples: usize, seed: u64) -> Result<()> {
        deck.validate_shape(self.dim)?;
        let a = deck.matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let p = self.sample_point(&mut rng);
            let q = deck.apply(&p);
            if !self.in_domain(&q) {
                continue;
            }
            let pulled = a.transpose() * self.metric_unchecked(&q) * &a;
            let g = self.metric_unchecked(&p);
            let scale = g.amax().max(1.0);
            if (pulled - g).amax() > 1e-10 * scale {
                return Err(Error::config(format!(
                    "deck element {} is not an isometry of {}",
                    deck.label, self.name
                )));
            }
        }
        Ok(())
    }

    /// A random chart point in a bounded region of the domain.
    pub fn sample_point<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match &self.geometry {
            Geometry::Flat { .. } => (0..self.dim).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            Geometry::Warped { .. } => vec![rng.gen_range(-5.0..5.0), rng.gen_range(-2.0..2.0)],
            Geometry::Ads2 => vec![rng.gen_range(0.0..2.0 * PI), rng.gen_range(-2.0..2.0)],
            Geometry::Custom(_) => (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Signature, symmetry and orientation checks at `samples` random points,
    /// plus the isometry check for every generator.
    pub fn validate(&self, samples: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let p = self.sample_point(&mut rng);
            let g = self.metric_unchecked(&p);
            check_lorentzian(&g).map_err(|msg| Error::config(format!("{}: {msg} at {p:?}", self.name)))?;
            let tau = self.time_orientation(&p);
            if self.inner_unchecked(&p, &tau, &tau) >= 0.0 {
                return Err(Error::config(format!(
                    "{}: time orientation is not timelike at {p:?}",
                    self.name
                )));
            }
        }
        if let Some(deck) = &self.deck {
            for g in &deck.generators {
                self.check_isometry(g, samples, seed ^ 0x9e37_79b9)?;
            }
        }
        Ok(())
    }
}

fn compress(word: &[(String, i64)]) -> Vec<(String, i64)> {
    let mut out: Vec<(String, i64)> = Vec::new();
    for (n, p) in word {
        match out.last_mut() {
            Some(last) if &last.0 == n => last.1 += p,
            _ => out.push((n.clone(), *p)),
        }
    }
    out.retain(|(_, p)| *p != 0);
    out
}

/// Symmetric within 1e-12 and exactly one negative eigenvalue.
pub fn check_lorentzian(g: &DMatrix<f64>) -> std::result::Result<(), String> {
    if !g.iter().all(|x| x.is_finite()) {
        return Err("non-finite metric".into());
    }
    if (g - g.transpose()).amax() > 1e-12 {
        return Err("metric is not symmetric".into());
    }
    let eig = SymmetricEigen::new(g.clone());
    let scale = eig.eigenvalues.amax().max(1e-300);
    let neg = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    if eig.eigenvalues.iter().any(|l| l.abs() <= 1e-12 * scale) {
        return Err("metric is degenerate".into());
    }
    if neg != 1 {
        return Err(format!("metric signature has {neg} negative eigenvalues, expected 1"));
    }
    Ok(())
}

/// `Γ^a_{bc} = ½ g^{ad}(∂_b g_{dc} + ∂_c g_{db} − ∂_d g_{bc})` with central
/// differences of the metric.
pub fn christoffel_fd<F>(metric: F, p: &[f64], out: &mut [f64])
where
    F: Fn(&[f64]) -> DMatrix<f64>,
{
    let n = p.len();
    let h = METRIC_FD_STEP;
    let mut dg = Vec::with_capacity(n);
    let mut q = p.to_vec();
    for k in 0..n {
        q[k] = p[k] + h;
        let gp = metric(&q);
        q[k] = p[k] - h;
        let gm = metric(&q);
        q[k] = p[k];
        dg.push((gp - gm) / (2.0 * h));
    }
    let ginv = metric(p).try_inverse().unwrap_or_else(|| DMatrix::zeros(n, n));
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for d in 0..n {
                    acc += ginv[(a, d)] * (dg[b][(d, c)] + dg[c][(d, b)] - dg[d][(b, c)]);
                }
                out[(a * n + b) * n + c] = 0.5 * acc;
            }
        }
    }
}

fn christoffel_deriv_fd(model: &SpacetimeModel, p: &[f64], out: &mut [f64]) {
    let n = p.len();
    let h = CHRISTOFFEL_FD_STEP;
    let n3 = n * n * n;
    let mut gp = vec![0.0; n3];
    let mut gm = vec![0.0; n3];
    let mut q = p.to_vec();
    for d in 0..n {
        q[d] = p[d] + h;
        model.christoffel_into(&q, &mut gp);
        q[d] = p[d] - h;
        model.christoffel_into(&q, &mut gm);
        q[d] = p[d];
        for i in 0..n3 {
            out[i * n + d] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
}

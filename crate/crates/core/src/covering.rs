//! Flat Lorentzian coverings: distance, future timelike isometries, Clifford
//! translations and the closed geodesics they produce.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loopspace::LoopCandidate;
use crate::manifold::{Character, DeckElement, Orientation, SpacetimeModel, TangentVec};

fn require_flat(model: &SpacetimeModel) -> Result<()> {
    if model.is_flat() {
        Ok(())
    } else {
        Err(Error::config(format!("{} is not flat; only flat coverings are supported", model.name())))
    }
}

/// `√(−g(b−a, b−a))` when `b − a` is future causal, else 0.
pub fn lorentz_distance_flat(model: &SpacetimeModel, a: &[f64], b: &[f64]) -> Result<f64> {
    require_flat(model)?;
    let d: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let c = model.classify(&TangentVec::new(a.to_vec(), d.clone()))?;
    if c.character == Character::Spacelike || c.orientation != Orientation::Future {
        return Ok(0.0);
    }
    let g = model.inner(a, &d, &d)?;
    Ok((-g).max(0.0).sqrt())
}

fn is_future_timelike_displacement(model: &SpacetimeModel, p: &[f64], q: &[f64]) -> Result<bool> {
    let d: Vec<f64> = q.iter().zip(p).map(|(x, y)| x - y).collect();
    if d.iter().all(|&x| x == 0.0) {
        return Ok(true);
    }
    let c = model.classify(&TangentVec::new(p.to_vec(), d))?;
    Ok(c.is_timelike() && c.orientation == Orientation::Future)
}

/// Whether `ρ(p) = p` or `ρ(p) ∈ I⁺(p)`: decided by the shift for
/// translations, by sampling otherwise.
pub fn is_future_timelike_isometry(model: &SpacetimeModel, deck: &DeckElement, samples: usize, seed: u64) -> Result<bool> {
    require_flat(model)?;
    model.check_isometry(deck, 8, seed)?;
    let origin = vec![0.0; model.dim()];
    if deck.is_translation() {
        return is_future_timelike_displacement(model, &origin, &deck.b);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let p = model.sample_point(&mut rng);
        if !is_future_timelike_displacement(model, &p, &deck.apply(&p))? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Serialize)]
pub struct IsometryReport {
    pub deck: DeckElement,
    pub future_timelike: bool,
    pub clifford: bool,
    pub distance_samples: Vec<(Vec<f64>, f64)>,
    pub distance_spread: f64,
}

/// Samples `d(p, ρ(p))`; Clifford when the spread is below `tol`.
pub fn is_clifford_translation(
    model: &SpacetimeModel,
    deck: &DeckElement,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<IsometryReport> {
    require_flat(model)?;
    if samples == 0 {
        return Err(Error::config("at least one sample is required"));
    }
    let future_timelike = is_future_timelike_isometry(model, deck, samples, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distance_samples = Vec::with_capacity(samples);
    for _ in 0..samples {
        let p = model.sample_point(&mut rng);
        let d = lorentz_distance_flat(model, &p, &deck.apply(&p))?;
        distance_samples.push((p, d));
    }
    let (lo, hi) = distance_samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, d)| (lo.min(*d), hi.max(*d)));
    let spread = hi - lo;
    Ok(IsometryReport {
        deck: deck.clone(),
        future_timelike,
        clifford: spread < tol,
        distance_samples,
        distance_spread: spread,
    })
}

/// The straight segment from `p` to `ρ(p)`, as a loop in the class of `deck`.
pub fn closed_geodesic_from_clifford(
    model: &SpacetimeModel,
    deck: &DeckElement,
    p: &[f64],
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<LoopCandidate> {
    require_flat(model)?;
    if deck.is_identity() {
        return Err(Error::Precondition(format!("deck element {} is trivial", deck.label)));
    }
    let report = is_clifford_translation(model, deck, samples, tol, seed)?;
    if !report.future_timelike || !report.clifford {
        return Err(Error::Precondition(format!(
            "deck element {} is not a future timelike Clifford translation",
            deck.label
        )));
    }
    model.check_domain(p)?;
    let image = deck.apply(p);
    if !is_future_timelike_displacement(model, p, &image)? || image == p {
        return Err(Error::Precondition(format!("ρ(p) is not in the chronological future of {p:?}")));
    }
    let v: Vec<f64> = image.iter().zip(p).map(|(a, b)| a - b).collect();
    LoopCandidate::evaluate(model, &TangentVec::new(p.to_vec(), v), deck, 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn boost(rapidity: f64) -> DeckElement {
        let (c, s) = (rapidity.cosh(), rapidity.sinh());
        DeckElement {
            label: "B".into(),
            a: vec![vec![c, s], vec![s, c]],
            b: vec![0.0, 0.0],
        }
    }

    #[test]
    fn distance_examples() {
        let m = SpacetimeModel::minkowski(2);
        assert_eq!(lorentz_distance_flat(&m, &[0.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert!((lorentz_distance_flat(&m, &[0.0, 0.0], &[2.0, 1.0]).unwrap() - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(lorentz_distance_flat(&m, &[0.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(lorentz_distance_flat(&m, &[0.0, 0.0], &[-1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn non_flat_rejected() {
        let m = SpacetimeModel::ads2();
        assert!(matches!(lorentz_distance_flat(&m, &[0.0, 0.0], &[1.0, 0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn translations_future_timelike() {
        let m = SpacetimeModel::minkowski(2);
        let t = |b: [f64; 2]| DeckElement::translation("g", b.to_vec());
        assert!(is_future_timelike_isometry(&m, &t([1.0, 0.0]), 10, 1).unwrap());
        assert!(!is_future_timelike_isometry(&m, &t([0.0, 1.0]), 10, 1).unwrap());
        assert!(!is_future_timelike_isometry(&m, &t([-1.0, 0.0]), 10, 1).unwrap());
    }

    #[test]
    fn clifford_examples() {
        let m = SpacetimeModel::minkowski(2);
        let r = is_clifford_translation(&m, &DeckElement::translation("g", vec![1.0, 0.0]), 100, 1e-12, 3).unwrap();
        assert!(r.clifford && r.future_timelike && r.distance_spread < 1e-12);
        let r = is_clifford_translation(&m, &boost(0.5), 100, 1e-12, 3).unwrap();
        assert!(!r.clifford);
        let r = is_clifford_translation(&m, &DeckElement::identity(2), 20, 1e-12, 3).unwrap();
        assert!(r.clifford && r.distance_spread == 0.0);
    }

    #[test]
    fn loops_from_clifford() {
        let m = SpacetimeModel::cylinder(1.0);
        let t = m.deck_element("T").unwrap();
        let lp = closed_geodesic_from_clifford(&m, &t, &[0.0, 0.3], 20, 1e-12, 0).unwrap();
        assert!((lp.v.comp[0] - 1.0).abs() < 1e-15 && lp.v.comp[1] == 0.0);
        assert!(lp.closure_defect < 1e-12 && (lp.length - 1.0).abs() < 1e-15);
        let t2 = m.deck_element("T^2").unwrap();
        let lp = closed_geodesic_from_clifford(&m, &t2, &[0.0, 0.0], 20, 1e-12, 0).unwrap();
        assert!((lp.length - 2.0).abs() < 1e-14);

        let g = DeckElement::translation("g", vec![2.0, 1.0]);
        let q = SpacetimeModel::flat_quotient(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]),
            vec![1.0, 0.0],
            vec![g.clone()],
            2,
        )
        .unwrap();
        let lp = closed_geodesic_from_clifford(&q, &g, &[0.0, 0.0], 20, 1e-12, 0).unwrap();
        assert!((lp.length - 3f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn trivial_and_spacelike_rejected() {
        let m = SpacetimeModel::minkowski(2);
        assert!(matches!(
            closed_geodesic_from_clifford(&m, &DeckElement::identity(2), &[0.0, 0.0], 10, 1e-12, 0),
            Err(Error::Precondition(_))
        ));
        let s = DeckElement::translation("s", vec![0.0, 1.0]);
        assert!(matches!(
            closed_geodesic_from_clifford(&m, &s, &[0.0, 0.0], 10, 1e-12, 0),
            Err(Error::Precondition(_))
        ));
    }
}

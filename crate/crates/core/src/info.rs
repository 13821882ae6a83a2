//! Per-pixel information content from class posteriors: Shannon entropy of a single
//! posterior and vote entropy of a committee of posteriors. Natural logarithm throughout;
//! `0 * ln 0` is taken as 0.

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::pool::ClassId;
use crate::scalar::Scalar;

pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-5;

/// Per-pixel class distribution, stored `(classes, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    pub image_id: String,
    values: Array3<T>,
}

impl<T: Scalar> ProbabilityMap<T> {
    /// Checks that every pixel holds a distribution in `[0, 1]` summing to one.
    pub fn new(image_id: impl Into<String>, values: Array3<T>) -> Result<Self> {
        let map = Self::new_unchecked(image_id, values);
        map.validate()?;
        Ok(map)
    }

    pub fn new_unchecked(image_id: impl Into<String>, values: Array3<T>) -> Self {
        ProbabilityMap {
            image_id: image_id.into(),
            values,
        }
    }

    pub fn values(&self) -> &Array3<T> {
        &self.values
    }

    pub fn into_values(self) -> Array3<T> {
        self.values
    }

    pub fn num_classes(&self) -> usize {
        self.values.dim().0
    }

    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.values.dim();
        if c == 0 {
            return Err(Error::Data("probability map has no classes".into()));
        }
        check_probabilities(&self.values)?;
        let tol = T::of(PROBABILITY_SUM_TOLERANCE);
        for r in 0..h {
            for col in 0..w {
                let sum: T = (0..c).map(|k| self.values[(k, r, col)]).sum();
                if (sum - T::one()).abs() > tol {
                    return Err(Error::Data(format!(
                        "{}: pixel ({r}, {col}) sums to {sum}",
                        self.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-pixel argmax with lowest-index tie-breaking.
    pub fn argmax(&self) -> Array2<ClassId> {
        let (c, h, w) = self.values.dim();
        let mut out = Array2::from_elem((h, w), ClassId(0));
        let mut best = self.values.index_axis(Axis(0), 0).to_owned();
        for k in 1..c {
            let plane = self.values.index_axis(Axis(0), k);
            ndarray::Zip::from(&mut out)
                .and(&mut best)
                .and(&plane)
                .for_each(|o, b, &p| {
                    if p > *b {
                        *b = p;
                        *o = ClassId(k as u16);
                    }
                });
        }
        out
    }
}

fn check_probabilities<T: Scalar>(values: &Array3<T>) -> Result<()> {
    for &p in values.iter() {
        if p.is_nan() || p < T::zero() || p > T::one() + T::of(PROBABILITY_SUM_TOLERANCE) {
            return Err(Error::Data(format!("invalid probability {p}")));
        }
    }
    Ok(())
}

/// Members of a stochastic committee evaluated on one image.
#[derive(Clone, Debug)]
pub struct CommitteePrediction<T> {
    members: Vec<ProbabilityMap<T>>,
}

impl<T: Scalar> CommitteePrediction<T> {
    pub fn new(members: Vec<ProbabilityMap<T>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "a committee needs at least 2 members, got {}",
                members.len()
            )));
        }
        let dim = members[0].values.dim();
        if let Some(m) = members.iter().find(|m| m.values.dim() != dim) {
            return Err(Error::Data(format!(
                "committee member has shape {:?}, expected {dim:?}",
                m.values.dim()
            )));
        }
        Ok(CommitteePrediction { members })
    }

    pub fn members(&self) -> &[ProbabilityMap<T>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Non-negative per-pixel information content, `(height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InformationMap<T> {
    pub image_id: String,
    pub values: Array2<T>,
}

/// Lowest class index among the maxima of `distribution`.
pub fn argmax_tiebreak<T: Scalar>(distribution: &[T]) -> Result<ClassId> {
    let (first, rest) = distribution
        .split_first()
        .ok_or_else(|| Error::Data("argmax of an empty distribution".into()))?;
    let mut best = 0usize;
    let mut best_val = *first;
    for (i, &v) in rest.iter().enumerate() {
        if v > best_val {
            best = i + 1;
            best_val = v;
        }
    }
    Ok(ClassId(best as u16))
}

fn plogp<T: Scalar>(p: T) -> T {
    if p > T::zero() {
        p * p.ln()
    } else {
        T::zero()
    }
}

/// `H = -sum_c P_c ln P_c` at every pixel.
pub fn entropy_map<T: Scalar>(probs: &ProbabilityMap<T>) -> Result<InformationMap<T>> {
    check_probabilities(&probs.values)?;
    let (c, h, w) = probs.values.dim();
    let mut out = Array2::from_elem((h, w), T::zero());
    for k in 0..c {
        let plane = probs.values.index_axis(Axis(0), k);
        ndarray::Zip::from(&mut out).and(&plane).for_each(|o, &p| *o -= plogp(p));
    }
    // -0.0 and tiny negative rounding from one-hot inputs
    out.mapv_inplace(|v| if v < T::zero() { T::zero() } else { v });
    Ok(InformationMap {
        image_id: probs.image_id.clone(),
        values: out,
    })
}

/// Vote entropy over the members' per-pixel argmax votes.
pub fn vote_entropy_map<T: Scalar>(committee: &CommitteePrediction<T>) -> Result<InformationMap<T>> {
    let first = &committee.members[0];
    let (c, h, w) = first.values.dim();
    for m in &committee.members {
        if m.values.dim() != (c, h, w) {
            return Err(Error::Data("committee members differ in shape".into()));
        }
        check_probabilities(&m.values)?;
    }
    let votes: Vec<Array2<ClassId>> = committee.members.iter().map(ProbabilityMap::argmax).collect();
    let n = T::from_usize(committee.members.len()).unwrap();
    let mut counts = vec![0usize; c];
    let out = Array2::from_shape_fn((h, w), |(r, col)| {
        counts.iter_mut().for_each(|v| *v = 0);
        for v in &votes {
            counts[v[(r, col)].index()] += 1;
        }
        let mut acc = T::zero();
        for &v in counts.iter().filter(|&&v| v > 0) {
            let frac = T::from_usize(v).unwrap() / n;
            acc -= frac * frac.ln();
        }
        if acc < T::zero() {
            T::zero()
        } else {
            acc
        }
    });
    Ok(InformationMap {
        image_id: first.image_id.clone(),
        values: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::assert_close;
    use proptest::prelude::*;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b) = ($a as f64, $b as f64);
                assert!((a - b).abs() <= $tol, "{a} vs {b}");
            }};
        }
        pub(crate) use assert_close;
    }

    fn single_pixel(p: &[f64]) -> ProbabilityMap<f64> {
        ProbabilityMap::new("x", Array3::from_shape_vec((p.len(), 1, 1), p.to_vec()).unwrap()).unwrap()
    }

    fn member_with_vote(c: usize, class: usize) -> ProbabilityMap<f64> {
        let mut p = vec![0.1 / (c - 1) as f64; c];
        p[class] = 0.9;
        single_pixel(&p)
    }

    #[test]
    fn entropy_closed_forms() {
        let uniform = entropy_map(&single_pixel(&[0.25; 4])).unwrap();
        assert_close!(uniform.values[(0, 0)], 1.386294, 1e-6);
        assert_eq!(entropy_map(&single_pixel(&[0.0, 1.0, 0.0])).unwrap().values[(0, 0)], 0.0);
        let half = entropy_map(&single_pixel(&[0.5, 0.5, 0.0, 0.0])).unwrap();
        assert_close!(half.values[(0, 0)], 0.693147, 1e-6);
    }

    #[test]
    fn entropy_rejects_bad_probabilities() {
        let nan = ProbabilityMap::new_unchecked("x", Array3::from_shape_vec((2, 1, 1), vec![f64::NAN, 1.0]).unwrap());
        assert!(matches!(entropy_map(&nan), Err(Error::Data(_))));
        let neg = ProbabilityMap::new_unchecked("x", Array3::from_shape_vec((2, 1, 1), vec![-0.1, 1.1]).unwrap());
        assert!(matches!(entropy_map(&neg), Err(Error::Data(_))));
        assert!(ProbabilityMap::new("x", Array3::from_shape_vec((2, 1, 1), vec![0.3, 0.3]).unwrap()).is_err());
    }

    #[test]
    fn vote_entropy_closed_forms() {
        let agree = CommitteePrediction::new((0..4).map(|_| member_with_vote(3, 1)).collect()).unwrap();
        assert_eq!(vote_entropy_map(&agree).unwrap().values[(0, 0)], 0.0);

        let split = CommitteePrediction::new([0, 0, 1, 1].iter().map(|&k| member_with_vote(3, k)).collect()).unwrap();
        assert_close!(vote_entropy_map(&split).unwrap().values[(0, 0)], 0.693147, 1e-6);

        // -(0.5 ln 0.5 + 2 * 0.25 ln 0.25), evaluated term by term
        let expected = -(0.5f64 * 0.5f64.ln() + 0.25 * 0.25f64.ln() + 0.25 * 0.25f64.ln());
        assert_close!(expected, 1.039721, 1e-6);
        let three = CommitteePrediction::new([0, 0, 1, 2].iter().map(|&k| member_with_vote(3, k)).collect()).unwrap();
        assert_close!(vote_entropy_map(&three).unwrap().values[(0, 0)], expected, 1e-12);
    }

    #[test]
    fn committee_shape_checks() {
        assert!(CommitteePrediction::new(vec![member_with_vote(3, 0)]).is_err());
        let other = single_pixel(&[0.5, 0.5]);
        assert!(CommitteePrediction::new(vec![member_with_vote(3, 0), other]).is_err());
    }

    #[test]
    fn identical_pair_has_zero_vote_entropy() {
        let m = single_pixel(&[0.2, 0.3, 0.5]);
        let c = CommitteePrediction::new(vec![m.clone(), m]).unwrap();
        assert_eq!(vote_entropy_map(&c).unwrap().values[(0, 0)], 0.0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_tiebreak(&[0.4, 0.4, 0.2]).unwrap(), ClassId(0));
        assert_eq!(argmax_tiebreak(&[0.1, 0.8, 0.1]).unwrap(), ClassId(1));
        let third = 1.0f64 / 3.0;
        assert_eq!(argmax_tiebreak(&[third, third, third]).unwrap(), ClassId(0));
        assert!(argmax_tiebreak::<f64>(&[]).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let p = ProbabilityMap::new("x", Array3::from_elem((4, 2, 2), 0.25f32)).unwrap();
        let h = entropy_map(&p).unwrap();
        assert!((h.values[(1, 1)] - 4.0f32.ln()).abs() < 1e-6);
    }

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut state = seed | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut raw = Array3::from_shape_fn((c, h, w), |_| next() + 1e-3);
        for r in 0..h {
            for col in 0..w {
                let s: f64 = (0..c).map(|k| raw[(k, r, col)]).sum();
                for k in 0..c {
                    raw[(k, r, col)] /= s;
                }
            }
        }
        raw
    }

    proptest! {
        #[test]
        fn entropy_is_channel_permutation_invariant(seed in any::<u64>(), shift in 1usize..3) {
            let raw = random_map(seed, 3, 4, 4);
            let mut permuted = raw.clone();
            for k in 0..3 {
                permuted.index_axis_mut(Axis(0), (k + shift) % 3).assign(&raw.index_axis(Axis(0), k));
            }
            let a = entropy_map(&ProbabilityMap::new("a", raw).unwrap()).unwrap();
            let b = entropy_map(&ProbabilityMap::new("a", permuted).unwrap()).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_bounded_by_ln_c(seed in any::<u64>(), c in 2usize..6) {
            let h = entropy_map(&ProbabilityMap::new("a", random_map(seed, c, 3, 3)).unwrap()).unwrap();
            for &v in h.values.iter() {
                prop_assert!(v >= 0.0 && v <= (c as f64).ln() + 1e-12);
            }
        }

        #[test]
        fn vote_entropy_is_invariant_to_monotone_rescaling(seed in any::<u64>(), n in 2usize..6) {
            let members: Vec<_> = (0..n)
                .map(|i| ProbabilityMap::new("a", random_map(seed.wrapping_add(i as u64 * 7919), 3, 4, 4)).unwrap())
                .collect();
            let scales = random_map(seed ^ 0xABCD, 1, 4, 4);
            let rescaled: Vec<_> = members
                .iter()
                .map(|m| {
                    let mut v = m.values().clone();
                    for r in 0..4 {
                        for c in 0..4 {
                            let gamma = 0.3 + 3.0 * scales[(0, r, c)];
                            let total: f64 = (0..3).map(|k| v[(k, r, c)].powf(gamma)).sum();
                            for k in 0..3 {
                                v[(k, r, c)] = v[(k, r, c)].powf(gamma) / total;
                            }
                        }
                    }
                    ProbabilityMap::new_unchecked("a", v)
                })
                .collect();
            let a = vote_entropy_map(&CommitteePrediction::new(members).unwrap()).unwrap();
            let b = vote_entropy_map(&CommitteePrediction::new(rescaled).unwrap()).unwrap();
            prop_assert_eq!(&a.values, &b.values);
            let bound = (n.min(3) as f64).ln() + 1e-12;
            prop_assert!(a.values.iter().all(|&v| v >= 0.0 && v <= bound));
        }
    }
}

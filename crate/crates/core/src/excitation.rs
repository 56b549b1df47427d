//! Active excitation.
//!
//! When the nominal plan would leave the input at rest, the data collected
//! online stops being persistently exciting and the lower-level KKT system
//! eventually becomes singular. Each step therefore first solves the plain
//! robust problem; if its nominal input is (near) zero the problem is solved
//! again with input headroom reserved for a random perturbation, which is
//! treated as one more measurable disturbance, and the sampled perturbation
//! is added to the first planned input.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hankel::{concatenated_pe, pe_heuristic, Dataset};
use crate::predictor::OutputMap;
use crate::robust::{solve_control, BoxSet, ControlSolution, HorizonSets, ObjectiveSpec, RobustOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationConfig {
    pub enabled: bool,
    /// Excitation set; must lie inside the input box.
    pub u_e_box: BoxSet,
    /// Absolute max-norm threshold below which the nominal input counts as
    /// zero.
    pub pe_tolerance: f64,
    /// Use the rank test on recorded plus planned inputs instead of the
    /// zero-input heuristic.
    pub use_exact_rank: bool,
    /// Hankel depth for the exact rank test.
    pub exact_rank_order: usize,
    pub rng_seed: u64,
}

impl ExcitationConfig {
    pub fn validate(&self, input_box: &BoxSet) -> Result<()> {
        if !(self.pe_tolerance >= 0.0) {
            return Err(Error::Parameter(format!(
                "pe_tolerance must be >= 0, got {}",
                self.pe_tolerance
            )));
        }
        if self.u_e_box.dim() != input_box.dim() {
            return Err(Error::dim("excitation box", input_box.dim(), self.u_e_box.dim()));
        }
        if !self.u_e_box.is_bounded() {
            return Err(Error::Parameter("excitation box must be bounded".into()));
        }
        if !input_box.contains_box(&self.u_e_box) {
            return Err(Error::Parameter("excitation box must lie inside the input box".into()));
        }
        let rest = minkowski_diff_box(input_box, &self.u_e_box)?;
        if (0..rest.dim()).all(|i| rest.lower()[i] == rest.upper()[i]) {
            return Err(Error::EmptySet(
                "input box minus excitation box leaves a single point".into(),
            ));
        }
        Ok(())
    }
}

/// `a ⊖ b` for boxes.
pub fn minkowski_diff_box(a: &BoxSet, b: &BoxSet) -> Result<BoxSet> {
    a.pontryagin_diff(b)
}

/// Per-step uncertainty box `W × U_e`.
pub fn augment_uncertainty(w_box: &BoxSet, u_e_box: &BoxSet) -> BoxSet {
    w_box.product(u_e_box)
}

/// Everything one receding-horizon step needs.
#[derive(Debug, Clone)]
pub struct StepProblem<'a> {
    pub map: &'a OutputMap,
    /// Input box `U` per step.
    pub input: &'a [BoxSet],
    pub output: &'a [BoxSet],
    /// Disturbance forecast box per step, centered at the nominal forecast.
    pub forecast: &'a [BoxSet],
    pub objective: &'a ObjectiveSpec,
    pub options: RobustOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub applied: DVector<f64>,
    /// Solution of the problem whose first input was applied.
    pub solution: ControlSolution,
    /// Solution of the first (unexcited) solve.
    pub nominal: ControlSolution,
    pub excited: bool,
    pub u_e: Option<DVector<f64>>,
}

fn plain_sets(p: &StepProblem<'_>) -> HorizonSets {
    HorizonSets {
        input: p.input.to_vec(),
        output: p.output.to_vec(),
        uncertainty: p.forecast.to_vec(),
        n_excite: 0,
    }
}

pub fn sample_box(b: &BoxSet, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(b.dim(), |i, _| {
        let (lo, hi) = (b.lower()[i], b.upper()[i]);
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        }
    })
}

/// One step of the excitation-aware controller. `recorded` is only read by
/// the exact rank test.
pub fn step(
    problem: &StepProblem<'_>,
    cfg: &ExcitationConfig,
    rng: &mut ChaCha8Rng,
    recorded: Option<&Dataset>,
) -> Result<StepOutcome> {
    let n_u = problem.map.n_u;
    let sets = plain_sets(problem);
    let nominal = solve_control(problem.map, &sets, problem.objective, &problem.options)?;
    let needs = if !cfg.enabled {
        false
    } else if cfg.use_exact_rank {
        let ds = recorded.ok_or_else(|| Error::Parameter("exact rank test needs the dataset".into()))?;
        let inputs = ds.inputs();
        !concatenated_pe(&inputs, &nominal.u_nominal, n_u, ds.capacity(), cfg.exact_rank_order)
    } else {
        pe_heuristic(&nominal.u_nominal, cfg.pe_tolerance)
    };
    if !needs {
        return Ok(StepOutcome {
            applied: nominal.first_input(n_u),
            solution: nominal.clone(),
            nominal,
            excited: false,
            u_e: None,
        });
    }

    let tightened: Vec<BoxSet> = problem
        .input
        .iter()
        .map(|u| minkowski_diff_box(u, &cfg.u_e_box))
        .collect::<Result<_>>()?;
    let augmented: Vec<BoxSet> = problem
        .forecast
        .iter()
        .map(|w| augment_uncertainty(w, &cfg.u_e_box))
        .collect();
    let sets = HorizonSets {
        input: tightened,
        output: problem.output.to_vec(),
        uncertainty: augmented,
        n_excite: n_u,
    };
    let solution = solve_control(problem.map, &sets, problem.objective, &problem.options)?;
    let u_e = sample_box(&cfg.u_e_box, rng);
    let applied = solution.first_input(n_u) + &u_e;
    Ok(StepOutcome {
        applied,
        solution,
        nominal,
        excited: true,
        u_e: Some(u_e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn difference_with_point_is_identity() {
        let a = BoxSet::uniform(2, -1.0, 3.0).unwrap();
        let d = minkowski_diff_box(&a, &BoxSet::point(DVector::zeros(2))).unwrap();
        assert_eq!(d, a);
    }

    #[test]
    fn difference_membership_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let lo: f64 = rng.random_range(-5.0..0.0);
            let hi: f64 = rng.random_range(1.0..5.0);
            let blo: f64 = rng.random_range(-0.4..0.0);
            let bhi: f64 = rng.random_range(0.0..0.4);
            let a = BoxSet::uniform(2, lo, hi).unwrap();
            let b = BoxSet::uniform(2, blo, bhi).unwrap();
            let d = minkowski_diff_box(&a, &b).unwrap();
            for _ in 0..20 {
                let x = sample_box(&d, &mut rng);
                let y = sample_box(&b, &mut rng);
                assert!(a.contains_tol(&(x + y), 1e-12));
            }
        }
    }

    #[test]
    fn augmentation_is_product() {
        let w = BoxSet::uniform(1, -1.0, 1.0).unwrap();
        let e = BoxSet::uniform(1, 0.0, 0.1).unwrap();
        let p = augment_uncertainty(&w, &e);
        assert_eq!(p.lower().as_slice(), &[-1.0, 0.0]);
        assert_eq!(p.upper().as_slice(), &[1.0, 0.1]);
        let z = augment_uncertainty(&w, &BoxSet::point(DVector::zeros(1)));
        assert_eq!(z.upper().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn config_rejects_full_width_excitation() {
        let u = BoxSet::uniform(1, 0.0, 1.0).unwrap();
        let cfg = ExcitationConfig {
            enabled: true,
            u_e_box: u.clone(),
            pe_tolerance: 1e-3,
            use_exact_rank: false,
            exact_rank_order: 1,
            rng_seed: 0,
        };
        assert!(cfg.validate(&u).is_err());
        let outside = ExcitationConfig {
            u_e_box: BoxSet::uniform(1, -0.1, 0.1).unwrap(),
            ..cfg.clone()
        };
        assert!(outside.validate(&u).is_err());
        let ok = ExcitationConfig {
            u_e_box: BoxSet::uniform(1, 0.0, 0.1).unwrap(),
            ..cfg
        };
        assert!(ok.validate(&u).is_ok());
    }
}

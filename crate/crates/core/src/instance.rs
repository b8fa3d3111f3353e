//! A complete problem instance: the plant, its control objective and the
//! initial state. This is the unit the protocol protects.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::group::Isomorphism;
use crate::objective::ControlObjective;
use crate::sysmodel::{lift_system, BarePlant, LiftedSystem};

#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub plant: BarePlant,
    pub sys: LiftedSystem,
    pub objective: ControlObjective,
    /// Lifted initial state.
    pub x0: DVector<f64>,
}

impl ProblemInstance {
    pub fn new(plant: BarePlant, objective: ControlObjective, x0_bare: DVector<f64>) -> Result<Self> {
        let sys = lift_system(&plant)?;
        if objective.n() != plant.n() || objective.input_dim() != plant.m() {
            return Err(Error::Dimension(format!(
                "objective dims ({},{}) do not match plant ({},{})",
                objective.n(),
                objective.input_dim(),
                plant.n(),
                plant.m()
            )));
        }
        if x0_bare.len() != plant.n() {
            return Err(Error::Dimension(format!(
                "initial state has length {}, expected {}",
                x0_bare.len(),
                plant.n()
            )));
        }
        let x0 = sys.lift_state(&x0_bare);
        Ok(Self {
            plant,
            sys,
            objective,
            x0,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.plant.n(), self.plant.m(), self.plant.p())
    }

    /// Image of the whole instance under an isomorphism: system, objective
    /// and initial state are transformed consistently.
    pub fn transform(&self, iso: &Isomorphism) -> Result<ProblemInstance> {
        let sys = iso.transform_system(&self.sys)?;
        let objective = self.objective.transform(iso)?;
        let mut x0 = iso.p() * &self.x0;
        let n1 = x0.len();
        x0[n1 - 1] = 1.0;
        let plant = sys.to_bare();
        Ok(ProblemInstance {
            plant,
            sys,
            objective,
            x0,
        })
    }
}

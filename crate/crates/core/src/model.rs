//! Bundles the pieces needed to run both estimators on one dataset.

use thiserror::Error;

use crate::availability::{AvailabilityTimeline, NearestBikeProfile, TimelineError};
use crate::choice::{ChoiceError, ThresholdDistribution};
use crate::em::{compute_pi, naive_estimate, EmConfig, EmEngine, EmError, EmProblem, EmResult, RateMatrix, TripEvent};
use crate::grid::{DistanceClassTable, GridSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Timeline(#[from] TimelineError),
    #[error(transparent)]
    Choice(#[from] ChoiceError),
    #[error(transparent)]
    Em(#[from] EmError),
}

pub struct ModelInputs {
    pub grid: GridSpec,
    pub table: DistanceClassTable,
    pub choice: ThresholdDistribution,
    pub timeline: AvailabilityTimeline,
    pub trips: Vec<TripEvent>,
}

pub struct PreparedModel {
    pub profile: NearestBikeProfile,
    pub problem: EmProblem,
}

pub struct Estimates {
    pub em: EmResult,
    pub naive: RateMatrix,
}

impl ModelInputs {
    pub fn days(&self) -> usize {
        self.timeline.days()
    }

    /// Time-integrates availability and computes every trip's choice vector.
    pub fn prepare(&self) -> Result<PreparedModel, ModelError> {
        let profile = self.timeline.nearest_profile(&self.table);
        let alpha = profile.alpha(&self.choice)?;
        let pi = compute_pi(&self.timeline, &self.table, &self.choice, &self.trips)?;
        let problem = EmProblem::new(self.trips.clone(), pi, alpha, self.days())?;
        Ok(PreparedModel { profile, problem })
    }
}

impl PreparedModel {
    pub fn estimate(&self, config: EmConfig, progress: impl FnMut(usize, f64)) -> Result<Estimates, ModelError> {
        let em = EmEngine::new(&self.problem, config)?.run(progress);
        let naive = naive_estimate(&self.problem.trips, &self.profile, self.problem.days, config.alpha_floor);
        Ok(Estimates { em, naive })
    }
}

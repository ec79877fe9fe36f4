//! Run configuration, synthetic data, persistence, reports and the
//! self-checks exposed by the command-line tool.

pub mod checkpoint;
mod config;
mod data;
mod gradcheck;
mod invariants;
mod report;

pub use config::{apply_override, RunConfig, PRECISION_ENV};
pub use data::{DataConfig, Sample, StagedTask};
pub use gradcheck::{gradcheck, GradcheckReport, TensorCheck, GRADCHECK_TOLERANCE};
pub use invariants::{eval_invariants, CheckResult, InvariantReport};
pub use report::{budget_table, route_stats, RouteStats, StageRow, REFERENCE_SIZES};

use crate::backbone::{Student, Teacher};
use crate::ckt::CktModule;
use crate::error::{CktError, Result};
use crate::training::{train, RunReport, TrainObserver};

/// Backbones, transfer module and task built from one [`RunConfig`].
pub struct Experiment {
    pub config: RunConfig,
    pub teacher: Teacher,
    pub student: Student,
    pub ckt: CktModule,
    pub task: StagedTask,
}

/// Largest backbone weight count [`Experiment::build`] will instantiate.
pub const MAX_BACKBONE_WEIGHTS: u64 = 50_000_000;

impl Experiment {
    pub fn build(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let n = config.backbone_weights();
        if n > MAX_BACKBONE_WEIGHTS {
            return Err(CktError::config(format!(
                "backbones need about {n} weights, above the {MAX_BACKBONE_WEIGHTS} this CPU build instantiates; \
                 only parameter accounting is available at this scale"
            )));
        }
        let teacher = Teacher::new(config.teacher.clone())?;
        let student = Student::new(config.student.clone())?;
        let ckt = CktModule::new(config.ckt.clone())?;
        let task = StagedTask::generate(&config.data, &config.teacher, &config.student)?;
        Ok(Experiment {
            config,
            teacher,
            student,
            ckt,
            task,
        })
    }

    pub fn train(&mut self, observer: &mut dyn TrainObserver) -> Result<RunReport> {
        let cfg = &self.config;
        let task = &self.task;
        let size = cfg.training.batch_size;
        train(
            &self.teacher,
            &self.student,
            &mut self.ckt,
            &cfg.training,
            cfg.precision,
            cfg.seed,
            &mut |step| task.batch(step, size),
            observer,
        )
    }
}

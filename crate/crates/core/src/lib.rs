//! Nonparametric finite mixtures with copula-coupled marginals, estimated by
//! a monotone MM iteration on a tensor grid.
//!
//! ```no_run
//! use npmix::{sample_mixture, table1, FitConfig, MmEstimator};
//!
//! let (data, _) = sample_mixture(&table1(), 300, 1).unwrap();
//! let config = FitConfig::default();
//! let est = MmEstimator::from_config(data.view(), &config).unwrap();
//! let init = est.initial_state(3, config.init, config.seed).unwrap();
//! let fit = est.fit(init, &config).unwrap();
//! println!("lambda = {:?}, rho = {:?}", fit.state.lambda, fit.state.rho);
//! ```

pub mod copula;
pub mod error;
pub mod grid;
pub mod init;
pub mod kernel;
pub mod metrics;
pub mod mm;
pub mod simulate;
pub mod smoothing;
pub mod special;

pub use copula::CopulaFamily;
pub use error::{Error, Result};
pub use grid::{DensityField, GridSpec, TensorGrid};
pub use init::InitMode;
pub use kernel::BandwidthMatrix;
pub use mm::{BandwidthMode, FitConfig, FitOutcome, FitTrace, GridConfig, MixtureState, MmEstimator};
pub use simulate::{sample_mixture, table1, ComponentSpec, Marginal, StudyConfig, StudyReport};
pub use smoothing::Smoother;

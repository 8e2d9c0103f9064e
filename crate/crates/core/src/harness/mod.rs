//! Fault and performance injection plus the experiment runner.

pub mod experiment;
pub mod faults;
pub mod testbed;

pub use experiment::{corruption_report, run_experiment, CorruptionLedger, Scenario};
pub use faults::{
    wrap_connection, CorruptionMode, CorruptionPolicy, DisconnectPolicy, FaultInjector,
    InjectedFault, LinkPolicy, PolicedStream, PolicyError, Throttle,
};
pub use testbed::Testbed;

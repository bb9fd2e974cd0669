//! Static and empirical analysis of how inference is distributed across the
//! layers of a convolutional network.
//!
//! * [`arch`]: architecture graphs, the line-based DSL and the builtin catalog.
//! * [`rf`]: receptive-field propagation, border layer and surgery suggestions.
//! * [`store`]: ACTD activation dumps, run manifests and IDX readers.
//! * [`saturation`]: streaming covariance and the saturation metric.
//! * [`probes`]: logistic-regression probes on captured activations.
//! * [`engine`]: a small deterministic CNN engine for desk-scale experiments.
//! * [`report`]: tail detection, report files and SVG charts.

pub mod arch;
pub mod engine;
pub mod probes;
pub mod report;
pub mod rf;
pub mod saturation;
pub mod store;

//! Volatility forecasting with GARCH dynamics embedded in recurrent cells.
//!
//! The crate covers the full pipeline: price ingestion and realized-volatility
//! targets (`data`), classical GARCH(1,1)/GJR maximum likelihood (`garch`),
//! GRU/LSTM cells and their GARCH-gated hybrids (`cells`, `model`),
//! hand-written backpropagation through time with Adam (`training`),
//! rolling-window forecasting (`forecast`), accuracy metrics (`eval`),
//! and Value-at-Risk backtesting (`risk`).

pub mod cells;
pub mod data;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod garch;
pub mod math;
pub mod model;
pub mod opt;
pub mod risk;
pub mod training;

pub use error::CoreError;

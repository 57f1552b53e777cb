pub mod calib;
pub mod cli;
pub mod charfn;
pub mod dependence;
pub mod error;
pub mod model;
pub mod montecarlo;
pub mod pricers;
pub mod specfun;
pub mod transforms;

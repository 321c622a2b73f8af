pub mod boxcox;
pub mod config;
pub mod coopgame;
pub mod envs;
pub mod nn;
pub mod policy;
pub mod trainer;
pub mod valuation;
pub mod verify;

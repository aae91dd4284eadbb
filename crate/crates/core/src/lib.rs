pub mod demo;
pub mod encoder;
pub mod evalstats;
pub mod external;
pub mod lexmetrics;
pub mod rng;
pub mod signals;
pub mod synthgen;
pub mod textcore;
pub mod trainer;

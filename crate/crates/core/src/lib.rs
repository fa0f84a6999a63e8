pub mod numerics;
pub mod embedding;
pub mod corpus;
pub mod model;
pub mod metrics;
pub mod spotting;
pub mod training;

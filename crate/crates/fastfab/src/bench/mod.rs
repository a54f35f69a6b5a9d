pub mod experiment;
pub mod report;
pub mod topology;
pub mod workload;

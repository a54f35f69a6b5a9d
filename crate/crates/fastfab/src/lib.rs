pub mod bench;
pub mod blockstore;
pub mod cache;
pub mod committer;
pub mod endorser;
pub mod orderer;
pub mod ordering_log;
pub mod proto;
pub mod statestore;
pub mod transport;

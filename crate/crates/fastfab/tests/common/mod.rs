#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use fastfab::bench::workload::{generate, Genesis, Participants, Workload, WorkloadSpec};
use fastfab::ordering_log::{LogServer, OrderingLog};
use fastfab::orderer::{Orderer, OrdererConfig, OrdererContext};
use fastfab::transport::{Mode, Network};
use fastfab_core::{Block, SignatureScheme};

pub fn mac_parts(clients: usize, endorsers: usize) -> Participants {
    Participants::new(SignatureScheme::Mac, 7, clients, endorsers)
}

pub fn small_genesis() -> Genesis {
    Genesis {
        accounts: 200,
        balance: 1_000_000,
    }
}

pub fn workload(parts: &Participants, txs: u64, block_size: usize, seed: u64) -> Workload {
    generate(parts, &small_genesis(), &WorkloadSpec::valid(txs, block_size, 0, seed))
}

/// Log service plus orderer on a fresh network.
pub struct OrderingService {
    pub net: Network,
    pub log: Arc<OrderingLog>,
    pub log_server: LogServer,
    pub orderer: Orderer,
}

pub fn ordering_service(parts: &Participants, config: OrdererConfig, mode: Mode) -> OrderingService {
    let net = Network::new();
    let log = Arc::new(OrderingLog::in_memory());
    let log_server = LogServer::start(&net, &parts.log, mode, log.clone()).unwrap();
    let ctx = OrdererContext {
        registry: Arc::new(parts.registry()),
        key: parts.key(&parts.orderer),
        log_node: parts.log.clone(),
    };
    let orderer = Orderer::start(&net, &parts.orderer, mode, config, ctx, Block::genesis()).unwrap();
    OrderingService {
        net,
        log,
        log_server,
        orderer,
    }
}

pub const WAIT: Duration = Duration::from_secs(20);

/// Decoded blocks 1..height of the orderer's chain.
pub fn ordered_blocks(orderer: &Orderer) -> Vec<Block> {
    (1..orderer.height())
        .map(|n| Block::decode(&orderer.block(n).unwrap()).unwrap())
        .collect()
}

//! Topology files: `[node]` sections of `key = value` lines.
//!
//! ```text
//! # comment
//! [node]
//! id = orderer0
//! role = orderer
//! address = 127.0.0.1:7050
//! mode = tcp
//! ```
//!
//! `address` is optional for in-process nodes and for TCP nodes that may bind
//! any free port.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::transport::Mode;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("node {0:?} declared twice")]
    DuplicateNode(String),
    #[error("node section ending at line {0} lacks an id")]
    MissingId(usize),
    #[error("no node with role {0}")]
    MissingRole(&'static str),
    #[error("cannot read topology: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRole {
    Log,
    Orderer,
    Committer,
    Endorser,
    Store,
    Client,
}

impl NodeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Log => "log",
            NodeRole::Orderer => "orderer",
            NodeRole::Committer => "committer",
            NodeRole::Endorser => "endorser",
            NodeRole::Store => "store",
            NodeRole::Client => "client",
        }
    }
}

impl FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "log" => NodeRole::Log,
            "orderer" => NodeRole::Orderer,
            "committer" | "peer" => NodeRole::Committer,
            "endorser" => NodeRole::Endorser,
            "store" | "blockstore" => NodeRole::Store,
            "client" => NodeRole::Client,
            other => return Err(format!("unknown role {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: String,
    pub role: NodeRole,
    pub address: Option<SocketAddr>,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
}

#[derive(Default)]
struct Partial {
    id: Option<String>,
    role: Option<NodeRole>,
    address: Option<SocketAddr>,
    mode: Option<Mode>,
}

impl Topology {
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut nodes = Vec::new();
        let mut current: Option<Partial> = None;
        let mut seen = HashSet::new();
        let finish = |p: Partial, line: usize, nodes: &mut Vec<NodeSpec>, seen: &mut HashSet<String>| {
            let id = p.id.ok_or(TopologyError::MissingId(line))?;
            if !seen.insert(id.clone()) {
                return Err(TopologyError::DuplicateNode(id));
            }
            nodes.push(NodeSpec {
                role: p.role.ok_or_else(|| TopologyError::Syntax {
                    line,
                    message: format!("node {id} lacks a role"),
                })?,
                id,
                address: p.address,
                mode: p.mode.unwrap_or(Mode::InProc),
            });
            Ok(())
        };
        let lines: Vec<&str> = text.lines().collect();
        for (i, raw) in lines.iter().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line == "[node]" {
                if let Some(p) = current.take() {
                    finish(p, n - 1, &mut nodes, &mut seen)?;
                }
                current = Some(Partial::default());
                continue;
            }
            let syntax = |message: String| TopologyError::Syntax { line: n, message };
            let Some(p) = current.as_mut() else {
                return Err(syntax("key outside a [node] section".into()));
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| syntax(format!("expected key = value, got {line:?}")))?;
            match key {
                "id" => p.id = Some(value.to_string()),
                "role" => p.role = Some(value.parse().map_err(syntax)?),
                "address" => p.address = Some(value.parse().map_err(|e| syntax(format!("bad address: {e}")))?),
                "mode" => p.mode = Some(value.parse().map_err(syntax)?),
                other => return Err(syntax(format!("unknown key {other:?}"))),
            }
        }
        if let Some(p) = current.take() {
            finish(p, lines.len(), &mut nodes, &mut seen)?;
        }
        Ok(Self { nodes })
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TopologyError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn with_role(&self, role: NodeRole) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(move |n| n.role == role)
    }

    pub fn one(&self, role: NodeRole) -> Result<&NodeSpec, TopologyError> {
        self.with_role(role).next().ok_or(TopologyError::MissingRole(role.as_str()))
    }

    /// Single-process layout: one of each service plus `endorsers` endorsers.
    pub fn local(endorsers: usize, mode: Mode) -> Self {
        use super::workload::{COMMITTER, LOG, ORDERER, STORE};
        let node = |id: &str, role| NodeSpec {
            id: id.to_string(),
            role,
            address: None,
            mode,
        };
        let mut nodes = vec![
            node(LOG, NodeRole::Log),
            node(ORDERER, NodeRole::Orderer),
            node(COMMITTER, NodeRole::Committer),
            node(STORE, NodeRole::Store),
        ];
        for i in 0..endorsers.max(1) {
            nodes.push(node(&format!("endorser{i}"), NodeRole::Endorser));
        }
        nodes.push(node("client0", NodeRole::Client));
        Self { nodes }
    }
}

//! Message types and bodies exchanged between nodes.
//!
//! Bodies use the same little-endian, `u32`-length-prefixed framing as the
//! transaction wire format.

use fastfab_core::codec::{Reader, WireError, Writer};
use fastfab_core::ValidationFlag;

// Client <-> orderer
pub const SUBMIT: u16 = 0x0001;
pub const ACK: u16 = 0x0002;
pub const REJECT: u16 = 0x0003;
// Peer <-> orderer
pub const DELIVER_FROM: u16 = 0x0010;
pub const DELIVER: u16 = 0x0011;
// Ordering log
pub const PUBLISH: u16 = 0x0020;
pub const OFFSET: u16 = 0x0021;
pub const SUBSCRIBE: u16 = 0x0022;
pub const RECORD: u16 = 0x0023;
pub const LOG_ERROR: u16 = 0x0024;
// Endorser
pub const ENDORSE: u16 = 0x0030;
pub const ENDORSED: u16 = 0x0031;
pub const ENDORSE_ERROR: u16 = 0x0032;
pub const WATCH_APPLIED: u16 = 0x0033;
pub const APPLIED: u16 = 0x0034;
// Committer fan-out and block store
pub const VALIDATED: u16 = 0x0040;
pub const GET_BLOCK: u16 = 0x0041;
pub const BLOCK: u16 = 0x0042;
pub const GET_TX: u16 = 0x0043;
pub const TX_LOCATION: u16 = 0x0044;
pub const NOT_FOUND: u16 = 0x0045;
pub const PUT_SNAPSHOT: u16 = 0x0046;
pub const SNAPSHOT_STORED: u16 = 0x0047;
pub const STORE_ERROR: u16 = 0x0048;

/// Reason codes carried by `REJECT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum RejectCode {
    Unauthorized = 1,
    Malformed = 2,
    Duplicate = 3,
    Unavailable = 4,
}

impl RejectCode {
    pub fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::Unauthorized,
            2 => Self::Malformed,
            3 => Self::Duplicate,
            4 => Self::Unavailable,
            _ => return None,
        })
    }
}

pub fn u64_body(v: u64) -> [u8; 8] {
    v.to_le_bytes()
}

pub fn parse_u64(body: &[u8]) -> Result<u64, WireError> {
    let mut r = Reader::new(body);
    let v = r.u64()?;
    r.finish()?;
    Ok(v)
}

/// `PUBLISH`: `u32 chan_len ‖ chan ‖ payload`.
pub fn encode_publish(channel: &str, payload: &[u8]) -> Vec<u8> {
    let mut w = Writer::with_capacity(4 + channel.len() + payload.len());
    w.str(channel).raw(payload);
    w.finish()
}

pub fn decode_publish(body: &[u8]) -> Result<(&str, &[u8]), WireError> {
    let mut r = Reader::new(body);
    let chan = r.bytes()?;
    let chan = std::str::from_utf8(chan).map_err(|_| WireError::BadMagic("channel is not UTF-8"))?;
    Ok((chan, r.rest()))
}

/// `SUBSCRIBE`: `u32 chan_len ‖ chan ‖ u64 from`.
pub fn encode_subscribe(channel: &str, from: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(channel).u64(from);
    w.finish()
}

pub fn decode_subscribe(body: &[u8]) -> Result<(String, u64), WireError> {
    let mut r = Reader::new(body);
    let chan = r.string()?;
    let from = r.u64()?;
    r.finish()?;
    Ok((chan, from))
}

/// `RECORD`: `u64 offset ‖ u32 len ‖ payload`.
pub fn encode_record(offset: u64, payload: &[u8]) -> Vec<u8> {
    let mut w = Writer::with_capacity(12 + payload.len());
    w.u64(offset).bytes(payload);
    w.finish()
}

pub fn decode_record(body: &[u8]) -> Result<(u64, &[u8]), WireError> {
    let mut r = Reader::new(body);
    let offset = r.u64()?;
    let payload = r.bytes()?;
    r.finish()?;
    Ok((offset, payload))
}

/// `ENDORSE`: `u32 from ‖ u32 to ‖ u64 amount ‖ u32 padding_len ‖ u32 client ‖ u64 nonce`
/// (strings length-prefixed).
pub fn encode_endorse(p: &fastfab_core::chaincode::TransferProposal, client: &str, nonce: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(&p.from_account)
        .str(&p.to_account)
        .u64(p.amount)
        .u32(p.padding_len)
        .str(client)
        .u64(nonce);
    w.finish()
}

pub fn decode_endorse(body: &[u8]) -> Result<(fastfab_core::chaincode::TransferProposal, String, u64), WireError> {
    let mut r = Reader::new(body);
    let proposal = fastfab_core::chaincode::TransferProposal {
        from_account: r.string()?,
        to_account: r.string()?,
        amount: r.u64()?,
        padding_len: r.u32()?,
    };
    let client = r.string()?;
    let nonce = r.u64()?;
    r.finish()?;
    Ok((proposal, client, nonce))
}

/// `ENDORSED`: `u32 header ‖ u32 rwset ‖ u32 endorser ‖ u32 signature`.
pub fn encode_endorsed(e: &fastfab_core::chaincode::Endorsed) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&e.header.encode())
        .bytes(&e.rwset.encode())
        .str(&e.endorsement.endorser)
        .bytes(&e.endorsement.signature);
    w.finish()
}

pub fn decode_endorsed(body: &[u8]) -> Result<fastfab_core::chaincode::Endorsed, WireError> {
    use fastfab_core::{Endorsement, ReadWriteSet, TxHeader};
    let mut r = Reader::new(body);
    let header = TxHeader::decode(r.bytes()?)?;
    let rwset = ReadWriteSet::decode(r.bytes()?)?;
    let endorsement = Endorsement {
        endorser: r.string()?,
        signature: r.bytes()?.to_vec(),
    };
    r.finish()?;
    Ok(fastfab_core::chaincode::Endorsed {
        header,
        rwset,
        endorsement,
    })
}

/// `APPLIED`: `u64 block ‖ u32 n ‖ (u32 len ‖ tx_id ‖ u8 flag)*`.
pub fn encode_applied(block: u64, txs: &[(String, ValidationFlag)]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(block).u32(txs.len() as u32);
    for (id, flag) in txs {
        w.str(id).u8(*flag as u8);
    }
    w.finish()
}

pub fn decode_applied(body: &[u8]) -> Result<(u64, Vec<(String, ValidationFlag)>), WireError> {
    let mut r = Reader::new(body);
    let block = r.u64()?;
    let n = r.u32()? as usize;
    let mut txs = Vec::with_capacity(n.min(r.remaining() / 5));
    for _ in 0..n {
        let id = r.string()?;
        let flag = ValidationFlag::from_u8(r.u8()?).ok_or(WireError::BadMagic("unknown validation flag"))?;
        txs.push((id, flag));
    }
    r.finish()?;
    Ok((block, txs))
}

/// `ENDORSE_ERROR`: `u8 code ‖ u32 len ‖ message`.
pub fn encode_endorse_error(code: u8, message: &str) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(code).str(message);
    w.finish()
}

pub fn decode_endorse_error(body: &[u8]) -> Result<(u8, String), WireError> {
    let mut r = Reader::new(body);
    let code = r.u8()?;
    let message = r.string()?;
    r.finish()?;
    Ok((code, message))
}

/// `TX_LOCATION`: `u64 block ‖ u32 index`.
pub fn encode_tx_location(block: u64, index: u32) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(block).u32(index);
    w.finish()
}

pub fn decode_tx_location(body: &[u8]) -> Result<(u64, u32), WireError> {
    let mut r = Reader::new(body);
    let loc = (r.u64()?, r.u32()?);
    r.finish()?;
    Ok(loc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fastfab_core::chaincode::TransferProposal;

    #[test]
    fn record_layout() {
        assert_eq!(
            encode_record(1, b"ab"),
            [1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, b'a', b'b']
        );
        assert_eq!(decode_record(&encode_record(7, b"xyz")).unwrap(), (7, &b"xyz"[..]));
    }

    #[test]
    fn publish_and_subscribe_bodies() {
        let body = encode_publish("ch", b"payload");
        assert_eq!(decode_publish(&body).unwrap(), ("ch", &b"payload"[..]));
        assert_eq!(decode_subscribe(&encode_subscribe("ch", 9)).unwrap(), ("ch".into(), 9));
    }

    #[test]
    fn endorse_body() {
        let p = TransferProposal {
            from_account: "a".into(),
            to_account: "b".into(),
            amount: 5,
            padding_len: 100,
        };
        assert_eq!(decode_endorse(&encode_endorse(&p, "c", 3)).unwrap(), (p, "c".into(), 3));
    }

    #[test]
    fn applied_body() {
        let txs = vec![("t1".to_string(), ValidationFlag::Valid), ("t2".to_string(), ValidationFlag::MvccConflict)];
        assert_eq!(decode_applied(&encode_applied(4, &txs)).unwrap(), (4, txs));
        assert!(decode_applied(&[0; 12]).is_ok());
        let mut bad = encode_applied(1, &[("x".into(), ValidationFlag::Valid)]);
        *bad.last_mut().unwrap() = 9;
        assert!(decode_applied(&bad).is_err());
    }
}

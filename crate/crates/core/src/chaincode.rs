//! The bundled money-transfer chaincode and endorsement.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::identity::SigningKey;
use crate::state::StateRead;
use crate::wire::{endorse_rwset, Endorsement, ReadWriteSet, TxHeader, Version};

/// State key of account `index`.
pub fn account_key(index: u32) -> String {
    format!("acct{index:06}")
}

pub fn encode_balance(balance: u64) -> Vec<u8> {
    balance.to_le_bytes().to_vec()
}

pub fn decode_balance(value: &[u8]) -> Option<u64> {
    value.try_into().ok().map(u64::from_le_bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TransferProposal {
    pub from_account: String,
    pub to_account: String,
    pub amount: u64,
    pub padding_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndorseError<E> {
    #[error("account {account} holds {balance}, transfer needs {amount}")]
    InsufficientFunds { account: String, balance: u64, amount: u64 },
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("proposal rejected: {0}")]
    BadProposal(&'static str),
    #[error("state read failed")]
    Storage(E),
}

struct Account {
    balance: u64,
    version: Version,
}

fn load<S: StateRead + ?Sized>(state: &S, key: &str) -> Result<Account, EndorseError<S::Error>> {
    let entry = state
        .get_entry(key)
        .map_err(EndorseError::Storage)?
        .ok_or_else(|| EndorseError::UnknownAccount(key.into()))?;
    let balance = decode_balance(&entry.value).ok_or(EndorseError::BadProposal("balance is not a u64"))?;
    Ok(Account {
        balance,
        version: entry.version,
    })
}

/// Executes a transfer against `state` without modifying it.
pub fn simulate_transfer<S: StateRead + ?Sized>(
    state: &S,
    proposal: &TransferProposal,
) -> Result<ReadWriteSet, EndorseError<S::Error>> {
    if proposal.from_account == proposal.to_account {
        return Err(EndorseError::BadProposal("source and destination are the same account"));
    }
    if proposal.amount == 0 {
        return Err(EndorseError::BadProposal("amount must be at least 1"));
    }
    let from = load(state, &proposal.from_account)?;
    let to = load(state, &proposal.to_account)?;
    if from.balance < proposal.amount {
        return Err(EndorseError::InsufficientFunds {
            account: proposal.from_account.clone(),
            balance: from.balance,
            amount: proposal.amount,
        });
    }
    let credited = to
        .balance
        .checked_add(proposal.amount)
        .ok_or(EndorseError::BadProposal("destination balance overflows"))?;
    Ok(ReadWriteSet {
        reads: vec![
            (proposal.from_account.clone(), from.version),
            (proposal.to_account.clone(), to.version),
        ],
        writes: vec![
            (proposal.from_account.clone(), encode_balance(from.balance - proposal.amount)),
            (proposal.to_account.clone(), encode_balance(credited)),
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endorsed {
    pub header: TxHeader,
    pub rwset: ReadWriteSet,
    pub endorsement: Endorsement,
}

/// Simulates `proposal` and signs the resulting rwset plus padding.
pub fn endorse<S: StateRead + ?Sized>(
    state: &S,
    proposal: &TransferProposal,
    channel_id: &str,
    client: &str,
    nonce: u64,
    endorser_id: &str,
    key: &SigningKey,
) -> Result<Endorsed, EndorseError<S::Error>> {
    let rwset = simulate_transfer(state, proposal)?;
    let endorsement = endorse_rwset(endorser_id, key, &rwset, proposal.padding_len as usize);
    Ok(Endorsed {
        header: TxHeader::new(channel_id, client, nonce),
        rwset,
        endorsement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::SignatureScheme;
    use crate::state::VersionedMap;

    fn state() -> VersionedMap {
        let mut s = VersionedMap::new();
        s.put("A", encode_balance(100), Version::new(1, 0));
        s.put("B", encode_balance(0), Version::new(1, 1));
        s
    }

    fn proposal(amount: u64) -> TransferProposal {
        TransferProposal {
            from_account: "A".into(),
            to_account: "B".into(),
            amount,
            padding_len: 0,
        }
    }

    #[test]
    fn transfer_reads_and_writes() {
        let rw = simulate_transfer(&state(), &proposal(10)).unwrap();
        assert_eq!(
            rw.reads,
            [("A".into(), Version::new(1, 0)), ("B".into(), Version::new(1, 1))]
        );
        assert_eq!(
            rw.writes,
            [("A".into(), encode_balance(90)), ("B".into(), encode_balance(10))]
        );
    }

    #[test]
    fn insufficient_funds() {
        assert!(matches!(
            simulate_transfer(&state(), &proposal(200)),
            Err(EndorseError::InsufficientFunds { balance: 100, amount: 200, .. })
        ));
    }

    #[test]
    fn unknown_account() {
        let mut p = proposal(1);
        p.to_account = "Z".into();
        assert_eq!(
            simulate_transfer(&state(), &p),
            Err(EndorseError::UnknownAccount("Z".into()))
        );
    }

    #[test]
    fn endorsement_is_read_only_and_repeatable() {
        let s = state();
        let key = SigningKey::derive(SignatureScheme::Ed25519, 0, "e0");
        let a = endorse(&s, &proposal(10), "ch", "c1", 1, "e0", &key).unwrap();
        let b = endorse(&s, &proposal(10), "ch", "c1", 1, "e0", &key).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, state());
    }

    #[test]
    fn account_keys_are_fixed_width() {
        assert_eq!(account_key(42), "acct000042");
        assert_eq!(decode_balance(&encode_balance(7)), Some(7));
        assert_eq!(decode_balance(&[1, 2]), None);
    }
}

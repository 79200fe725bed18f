//! Receipt tracking, the pending queue, and periodic collation.
//!
//! Every submitted request gets a receipt that moves along
//! `Queued -> Collated -> Extracting -> Transferring -> Done`, with
//! `Failed`/`Rejected` terminal from any pre-terminal state. When the
//! destination is the source site the transfer leg is skipped and
//! `Extracting -> Done` is legal. No receipt ever skips a state in the
//! forward chain or moves backward, and every accepted request reaches
//! exactly one terminal state.
//!
//! Collation drains the queue FIFO on a fixed interval (default 900 s,
//! configurable; tests inject a logical clock and run at millisecond
//! scale).

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::AuditLog;
use crate::request::ExtractionRequest;

pub const DEFAULT_COLLATION_INTERVAL_MS: u64 = 900_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReceiptState {
    Queued,
    Collated,
    Extracting,
    Transferring,
    Done,
    Failed,
    Rejected,
}

impl ReceiptState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ReceiptState::Done | ReceiptState::Failed | ReceiptState::Rejected)
    }

    pub fn name(self) -> &'static str {
        match self {
            ReceiptState::Queued => "Queued",
            ReceiptState::Collated => "Collated",
            ReceiptState::Extracting => "Extracting",
            ReceiptState::Transferring => "Transferring",
            ReceiptState::Done => "Done",
            ReceiptState::Failed => "Failed",
            ReceiptState::Rejected => "Rejected",
        }
    }

    pub fn from_name(s: &str) -> Option<ReceiptState> {
        Some(match s {
            "Queued" => ReceiptState::Queued,
            "Collated" => ReceiptState::Collated,
            "Extracting" => ReceiptState::Extracting,
            "Transferring" => ReceiptState::Transferring,
            "Done" => ReceiptState::Done,
            "Failed" => ReceiptState::Failed,
            "Rejected" => ReceiptState::Rejected,
            _ => return None,
        })
    }
}

/// Legal state transitions. The forward chain plus the local-delivery
/// shortcut `Extracting -> Done`, plus failure/rejection from any
/// pre-terminal state.
pub fn transition_allowed(from: ReceiptState, to: ReceiptState) -> bool {
    use ReceiptState::*;
    match (from, to) {
        (Queued, Collated)
        | (Collated, Extracting)
        | (Extracting, Transferring)
        | (Transferring, Done)
        | (Extracting, Done) => true,
        (from, Failed) | (from, Rejected) => !from.is_terminal(),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub receipt_id: String,
    pub state: ReceiptState,
    /// One entry per state entered, in order: (state, timestamp ms).
    pub history: Vec<(ReceiptState, u64)>,
    /// Where the result landed, set on Done.
    pub result_location: Option<String>,
    /// Failure detail, set on Failed/Rejected.
    pub detail: Option<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IntakeError {
    #[error("authenticated identity does not match request requester")]
    IdentityMismatch,
    #[error("request backlog full")]
    QueueFull,
    #[error("unknown receipt: {0}")]
    UnknownReceipt(String),
    #[error("illegal transition {from:?} -> {to:?} for receipt {receipt_id}")]
    IllegalTransition {
        receipt_id: String,
        from: ReceiptState,
        to: ReceiptState,
    },
}

struct IntakeState {
    receipts: HashMap<String, Receipt>,
    requests: HashMap<String, ExtractionRequest>,
    queue: VecDeque<String>,
    last_collation: Option<u64>,
}

/// Request intake: submission, the pending queue, and collation.
pub struct Intake {
    state: Mutex<IntakeState>,
    queue_bound: usize,
    pub interval_ms: u64,
    audit: Arc<AuditLog>,
}

impl Intake {
    pub fn new(queue_bound: usize, interval_ms: u64, audit: Arc<AuditLog>) -> Intake {
        Intake {
            state: Mutex::new(IntakeState {
                receipts: HashMap::new(),
                requests: HashMap::new(),
                queue: VecDeque::new(),
                last_collation: None,
            }),
            queue_bound,
            interval_ms,
            audit,
        }
    }

    fn fresh_receipt_id(state: &IntakeState) -> String {
        let mut rng = rand::thread_rng();
        loop {
            let mut bytes = [0u8; 8];
            rng.fill_bytes(&mut bytes);
            let id = hex::encode(bytes);
            if !state.receipts.contains_key(&id) {
                return id;
            }
        }
    }

    /// Queue a request. The authenticated DN must match the document's
    /// requester; the backlog is bounded and overflow is an explicit
    /// `QueueFull`, never a silent drop.
    pub fn submit(
        &self,
        request: ExtractionRequest,
        authenticated_dn: &str,
        now: u64,
    ) -> Result<Receipt, IntakeError> {
        if authenticated_dn != request.requester_dn {
            return Err(IntakeError::IdentityMismatch);
        }
        let mut state = self.state.lock().unwrap();
        if state.queue.len() >= self.queue_bound {
            return Err(IntakeError::QueueFull);
        }
        let id = Self::fresh_receipt_id(&state);
        let receipt = Receipt {
            receipt_id: id.clone(),
            state: ReceiptState::Queued,
            history: vec![(ReceiptState::Queued, now)],
            result_location: None,
            detail: None,
        };
        state.receipts.insert(id.clone(), receipt.clone());
        state.requests.insert(id.clone(), request.clone());
        state.queue.push_back(id.clone());
        self.audit.append(&id, &request.requester_dn, "submit", &format!("collection={}", request.collection));
        self.audit.append(&id, "system", "transition", "Queued");
        Ok(receipt)
    }

    /// True when a collation is due at `now`.
    pub fn collation_due(&self, now: u64) -> bool {
        let state = self.state.lock().unwrap();
        match state.last_collation {
            None => true,
            Some(last) => now >= last + self.interval_ms,
        }
    }

    /// Drain the pending queue FIFO into a batch, marking each receipt
    /// Collated. An empty queue yields an empty batch.
    pub fn collate(&self, now: u64) -> Vec<(String, ExtractionRequest)> {
        let mut state = self.state.lock().unwrap();
        state.last_collation = Some(now);
        let ids: Vec<String> = state.queue.drain(..).collect();
        let mut batch = Vec::with_capacity(ids.len());
        for id in ids {
            let receipt = state.receipts.get_mut(&id).expect("queued receipt exists");
            receipt.state = ReceiptState::Collated;
            receipt.history.push((ReceiptState::Collated, now));
            self.audit.append(&id, "system", "transition", "Collated");
            batch.push((id.clone(), state.requests[&id].clone()));
        }
        batch
    }

    pub fn status(&self, receipt_id: &str) -> Result<Receipt, IntakeError> {
        self.state
            .lock()
            .unwrap()
            .receipts
            .get(receipt_id)
            .cloned()
            .ok_or_else(|| IntakeError::UnknownReceipt(receipt_id.to_string()))
    }

    pub fn request_for(&self, receipt_id: &str) -> Option<ExtractionRequest> {
        self.state.lock().unwrap().requests.get(receipt_id).cloned()
    }

    /// Advance a receipt, enforcing the transition relation, auditing the
    /// move, and recording optional detail (result location on Done,
    /// failure reason on Failed/Rejected).
    pub fn advance(
        &self,
        receipt_id: &str,
        to: ReceiptState,
        now: u64,
        detail: Option<&str>,
    ) -> Result<Receipt, IntakeError> {
        let mut state = self.state.lock().unwrap();
        let receipt = state
            .receipts
            .get_mut(receipt_id)
            .ok_or_else(|| IntakeError::UnknownReceipt(receipt_id.to_string()))?;
        if !transition_allowed(receipt.state, to) {
            return Err(IntakeError::IllegalTransition {
                receipt_id: receipt_id.to_string(),
                from: receipt.state,
                to,
            });
        }
        receipt.state = to;
        receipt.history.push((to, now));
        match to {
            ReceiptState::Done => receipt.result_location = detail.map(str::to_string),
            ReceiptState::Failed | ReceiptState::Rejected => {
                receipt.detail = detail.map(str::to_string)
            }
            _ => {}
        }
        let receipt = receipt.clone();
        drop(state);
        self.audit.append(receipt_id, "system", "transition", to.name());
        Ok(receipt)
    }

    pub fn receipts(&self) -> Vec<Receipt> {
        self.state.lock().unwrap().receipts.values().cloned().collect()
    }

    pub fn pending_count(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }
}

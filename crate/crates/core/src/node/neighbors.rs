//! Heartbeat-driven view of which neighbours are currently reachable.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::NodeError;
use crate::model::Millis;
use crate::wire::EndpointId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborState {
    pub available: bool,
    pub last_heartbeat: Option<Millis>,
}

/// A member is available iff it heartbeated within the last `timeout` ms,
/// boundary inclusive. Members that never heartbeated are unavailable.
#[derive(Debug, Clone)]
pub struct NeighborModel {
    timeout: Millis,
    last: BTreeMap<EndpointId, Option<Millis>>,
}

impl NeighborModel {
    pub fn new(members: impl IntoIterator<Item = EndpointId>, timeout: Millis) -> Self {
        NeighborModel { timeout, last: members.into_iter().map(|m| (m, None)).collect() }
    }

    pub fn timeout(&self) -> Millis {
        self.timeout
    }

    pub fn is_member(&self, id: EndpointId) -> bool {
        self.last.contains_key(&id)
    }

    pub fn on_heartbeat(&mut self, from: EndpointId, at: Millis) -> Result<(), NodeError> {
        let slot = self.last.get_mut(&from).ok_or(NodeError::UnknownNode(from))?;
        *slot = Some(slot.map_or(at, |prev| prev.max(at)));
        Ok(())
    }

    pub fn state(&self, id: EndpointId, now: Millis) -> Option<NeighborState> {
        let last = *self.last.get(&id)?;
        Some(NeighborState {
            available: last.is_some_and(|t| now.saturating_sub(t) <= self.timeout),
            last_heartbeat: last,
        })
    }

    pub fn is_available(&self, id: EndpointId, now: Millis) -> bool {
        self.state(id, now).is_some_and(|s| s.available)
    }

    /// Available members in id order.
    pub fn available(&self, now: Millis) -> Vec<EndpointId> {
        self.last.keys().copied().filter(|id| self.is_available(*id, now)).collect()
    }

    pub fn members(&self) -> impl Iterator<Item = EndpointId> + '_ {
        self.last.keys().copied()
    }
}

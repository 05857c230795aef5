//! Live health state of NICs and links, shared by probing, migration and
//! planning. Deliberately small: a component is either up or down.

use std::collections::BTreeSet;

use crate::topology::NicId;

#[derive(Debug, Clone, Default)]
pub struct HealthMap {
    down_nics: BTreeSet<NicId>,
    down_links: BTreeSet<(NicId, NicId)>,
}

fn link_key(a: NicId, b: NicId) -> (NicId, NicId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl HealthMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fail_nic(&mut self, nic: NicId) {
        self.down_nics.insert(nic);
    }

    pub fn recover_nic(&mut self, nic: NicId) {
        self.down_nics.remove(&nic);
    }

    pub fn fail_link(&mut self, a: NicId, b: NicId) {
        self.down_links.insert(link_key(a, b));
    }

    pub fn recover_link(&mut self, a: NicId, b: NicId) {
        self.down_links.remove(&link_key(a, b));
    }

    pub fn nic_healthy(&self, nic: NicId) -> bool {
        !self.down_nics.contains(&nic)
    }

    /// The cable itself; does not imply either endpoint NIC is healthy.
    pub fn link_up(&self, a: NicId, b: NicId) -> bool {
        !self.down_links.contains(&link_key(a, b))
    }

    /// End-to-end: both NICs and the cable.
    pub fn path_healthy(&self, a: NicId, b: NicId) -> bool {
        self.nic_healthy(a) && self.nic_healthy(b) && self.link_up(a, b)
    }

    pub fn down_nics(&self) -> impl Iterator<Item = NicId> + '_ {
        self.down_nics.iter().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_state_is_symmetric() {
        let mut h = HealthMap::new();
        h.fail_link(NicId(3), NicId(1));
        assert!(!h.link_up(NicId(1), NicId(3)));
        assert!(!h.path_healthy(NicId(3), NicId(1)));
        assert!(h.nic_healthy(NicId(1)));
        h.recover_link(NicId(1), NicId(3));
        assert!(h.path_healthy(NicId(3), NicId(1)));
    }
}

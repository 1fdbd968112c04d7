//! Private-overlay bootstrap through the public DHT: advertise, discover,
//! connect, then keep querying to heal partitions.

use crate::dht::DhtEntry;
use crate::overlay::ConnectionKind;
use crate::private::{discovery_key, next_query_delay, partition_check, Advert, JoinPhase, PartitionAction, QuerySchedule};
use crate::ring::NodeId;
use crate::sim::{Time, TrafficTag};

use super::routing::{Body, GetMode, Pending};
use super::{Ev, ProcId, World};

impl World {
    /// Public partner became connected: start advertising the private side.
    pub(super) fn on_public_connected(&mut self, public: ProcId) {
        let Some(private) = self.procs[public.idx()].partner else { return };
        let q = &mut self.procs[private.idx()];
        if !q.alive || q.phase != JoinPhase::PublicConnecting {
            return;
        }
        q.phase = JoinPhase::Advertising;
        self.put_advert(public);
    }

    fn put_advert(&mut self, public: ProcId) {
        let Some(private) = self.procs[public.idx()].partner else { return };
        if !self.procs[public.idx()].alive {
            return;
        }
        let pr = &mut self.procs[public.idx()];
        pr.advert_gen += 1;
        let gen = pr.advert_gen;
        let public_id = pr.id;
        let q = &self.procs[private.idx()];
        let key = discovery_key(&q.discovery_group, self.space);
        let value = Advert { private_id: q.id, public_id }.encode(self.space, self.cfg.node.sizes.advert_hints as usize);
        let entry = DhtEntry { key, value, lease_expiry: self.now() + self.cfg.advert_ttl, inserter: public_id };
        self.start_request(public, key, Body::Put(entry), TrafficTag::Discovery, Pending::Advert { private });
        self.kernel.schedule(self.cfg.advert_ttl / 2, Ev::LeaseRenew { proc: public, gen });
    }

    pub(super) fn on_lease_renew(&mut self, public: ProcId, gen: u64) {
        if self.procs[public.idx()].advert_gen == gen {
            self.put_advert(public);
        }
    }

    pub(super) fn advert_failed(&mut self, private: ProcId) {
        if self.procs[private.idx()].phase == JoinPhase::Advertising {
            if let Some(public) = self.procs[private.idx()].partner {
                self.put_advert(public);
            }
        }
    }

    pub(super) fn advert_stored(&mut self, private: ProcId) {
        if self.procs[private.idx()].phase == JoinPhase::Advertising {
            self.procs[private.idx()].phase = JoinPhase::Discovering;
            self.discover(private, false);
        }
    }

    fn discover(&mut self, private: ProcId, partition: bool) {
        let q = &self.procs[private.idx()];
        let Some(public) = q.partner else { return };
        if !q.alive {
            return;
        }
        let key = discovery_key(&q.discovery_group, self.space);
        if partition {
            let now = self.now();
            self.queries.push((private, now));
        }
        self.start_request(
            public,
            key,
            Body::Get { key, mode: GetMode::Primary },
            TrafficTag::Discovery,
            Pending::Discovery { private, partition },
        );
    }

    fn schedule_query(&mut self, private: ProcId, delay: Time) {
        let q = &mut self.procs[private.idx()];
        q.query_gen += 1;
        let gen = q.query_gen;
        self.kernel.schedule(delay, Ev::Query { proc: private, gen });
    }

    pub(super) fn on_query(&mut self, private: ProcId, gen: u64) {
        let q = &self.procs[private.idx()];
        if !q.alive || q.query_gen != gen {
            return;
        }
        match q.phase {
            JoinPhase::Discovering => self.discover(private, false),
            JoinPhase::Connected => self.discover(private, true),
            _ => {}
        }
    }

    pub(super) fn discovery_result(&mut self, private: ProcId, values: Vec<Vec<u8>>, partition: bool) {
        if !self.procs[private.idx()].alive {
            return;
        }
        let me = self.procs[private.idx()].id;
        let mut found: Vec<(NodeId, ProcId)> = values
            .iter()
            .filter_map(|v| Advert::decode(v, self.space))
            .filter(|a| a.private_id != me)
            .filter_map(|a| self.addr[1].get(&a.private_id).map(|p| (a.private_id, *p)))
            .collect();
        found.sort();
        found.dedup();
        if partition {
            if self.procs[private.idx()].phase != JoinPhase::Connected {
                return;
            }
            let links = self.established(private);
            let ids: Vec<NodeId> = found.iter().map(|(id, _)| *id).collect();
            if let PartitionAction::Connect(id) = partition_check(me, &links, &ids, self.space) {
                let proc = self.addr[1][&id];
                self.procs[private.idx()].known.insert(id, proc);
                self.procs[private.idx()].failures.remove(&id);
                self.connect(private, id, proc, ConnectionKind::Neighbor);
                self.procs[private.idx()].query.reset();
            }
            let delay = self.procs[private.idx()].query.advance();
            self.schedule_query(private, delay);
            return;
        }
        let q = &self.procs[private.idx()];
        if q.phase != JoinPhase::Discovering || q.ctm_done {
            return;
        }
        if found.is_empty() {
            let attempt = q.discovery_attempt;
            let delay = self
                .cfg
                .discovery_backoff_initial
                .saturating_mul(1u64 << attempt.min(20))
                .min(self.cfg.discovery_backoff_max);
            self.procs[private.idx()].discovery_attempt += 1;
            self.schedule_query(private, delay);
            return;
        }
        self.shuffle(&mut found);
        let q = &mut self.procs[private.idx()];
        q.bootstrap = found;
        q.boot_cursor = 0;
        q.phase = JoinPhase::PrivateConnecting;
        self.try_bootstrap(private);
    }

    pub(super) fn on_private_connected(&mut self, private: ProcId) {
        let q = &mut self.procs[private.idx()];
        if q.phase == JoinPhase::Connected {
            return;
        }
        q.phase = JoinPhase::Connected;
        q.query = QuerySchedule::new(self.cfg.query_mode);
        let delay = q.query.advance();
        self.schedule_query(private, delay);
    }

    /// Points the private process at a different discovery key and
    /// re-advertises there at once.
    pub fn set_discovery_group(&mut self, p: ProcId, group: &str) {
        self.procs[p.idx()].discovery_group = group.to_string();
        let phase = self.procs[p.idx()].phase;
        if phase != JoinPhase::PublicConnecting {
            if let Some(public) = self.procs[p.idx()].partner {
                self.put_advert(public);
            }
        }
    }

    /// Query period currently in effect for a connected private process.
    pub fn query_period(&self, p: ProcId) -> Time {
        let s = self.procs[p.idx()].query;
        next_query_delay(QuerySchedule { mode: s.mode, attempt: s.attempt.saturating_sub(1) })
    }
}

//! Append-only message log. Every byte the metering layer reports comes from here.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum NodeId {
    /// Aggregation server 1 or 2.
    Server(u8),
    Client(u32),
    /// The AriaNN-style designated client aggregator, hosted by client 0.
    ClientAggregator,
    ModelOwner,
    Dealer,
}

impl NodeId {
    pub fn is_server(self) -> bool {
        matches!(self, NodeId::Server(_))
    }

    pub fn is_client_side(self) -> bool {
        matches!(self, NodeId::Client(_) | NodeId::ClientAggregator)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Channel {
    C2C,
    S2C,
    C2S,
    /// Dealer material and model-owner traffic, kept out of the online totals.
    Offline,
}

impl Channel {
    pub fn classify(from: NodeId, to: NodeId) -> Channel {
        match (from, to) {
            (NodeId::Dealer, _) | (_, NodeId::Dealer) => Channel::Offline,
            (NodeId::ModelOwner, _) | (_, NodeId::ModelOwner) => Channel::Offline,
            (a, b) if a.is_client_side() && b.is_client_side() => Channel::C2C,
            (a, _) if a.is_server() => Channel::S2C,
            _ => Channel::C2S,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Phase {
    Setup,
    Distribution,
    DataSharing,
    Training,
    Upload,
    Aggregation,
    Redistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum MessageKind {
    ModelShare,
    DataShare,
    BeaverOpen,
    MaskedReveal,
    TripleMaterial,
    KeyMaterial,
    SessionOpen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Message {
    pub round: u32,
    pub phase: Phase,
    pub from: NodeId,
    pub to: NodeId,
    pub kind: MessageKind,
    /// Total payload of the `count` messages this entry stands for.
    pub bytes: u64,
    pub count: u64,
    /// Queue wave for sessions that wait on server cores.
    pub wave: u32,
}

impl Message {
    pub fn channel(&self) -> Channel {
        Channel::classify(self.from, self.to)
    }
}

/// Sequential local compute charged to `executor` on lane `stream`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Work {
    pub round: u32,
    pub phase: Phase,
    pub executor: NodeId,
    pub stream: u32,
    pub ops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    messages: Vec<Message>,
    work: Vec<Work>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, m: Message) {
        self.messages.push(m);
    }

    pub fn push_work(&mut self, w: Work) {
        if w.ops > 0 {
            self.work.push(w);
        }
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn work(&self) -> &[Work] {
        &self.work
    }

    pub fn append(&mut self, other: Transcript) {
        self.messages.extend(other.messages);
        self.work.extend(other.work);
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.work.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.messages.iter().map(|m| m.bytes).sum()
    }

    pub fn message_count(&self) -> u64 {
        self.messages.iter().map(|m| m.count).sum()
    }

    pub fn bytes_on(&self, ch: Channel) -> u64 {
        self.messages.iter().filter(|m| m.channel() == ch).map(|m| m.bytes).sum()
    }

    pub fn count_on(&self, ch: Channel) -> u64 {
        self.messages.iter().filter(|m| m.channel() == ch).map(|m| m.count).sum()
    }

    pub fn filter<F: Fn(&Message) -> bool>(&self, f: F) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(move |m| f(m))
    }

    pub fn rounds(&self) -> Vec<u32> {
        let mut r: Vec<u32> = self.messages.iter().map(|m| m.round).chain(self.work.iter().map(|w| w.round)).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn for_round(&self, round: u32) -> Transcript {
        Transcript {
            messages: self.messages.iter().filter(|m| m.round == round).copied().collect(),
            work: self.work.iter().filter(|w| w.round == round).copied().collect(),
        }
    }

    /// Totals per (kind, channel), the view the analytic cost audit compares.
    pub fn summary(&self) -> Vec<(MessageKind, Channel, u64, u64)> {
        let mut map = std::collections::BTreeMap::new();
        for m in &self.messages {
            let e = map.entry((m.kind, m.channel())).or_insert((0u64, 0u64));
            e.0 += m.count;
            e.1 += m.bytes;
        }
        map.into_iter().map(|((k, c), (n, b))| (k, c, n, b)).collect()
    }
}

/// The two endpoints of a secure session plus the log their exchanges land in.
#[derive(Clone, Debug)]
pub struct PairLink {
    pub ends: [NodeId; 2],
    pub round: u32,
    pub phase: Phase,
    pub wave: u32,
    pub log: Transcript,
}

impl PairLink {
    pub fn new(ends: [NodeId; 2]) -> Self {
        PairLink {
            ends,
            round: 0,
            phase: Phase::Training,
            wave: 0,
            log: Transcript::new(),
        }
    }

    /// A throwaway link between two clients, for unit tests and examples.
    pub fn loopback() -> Self {
        Self::new([NodeId::Client(0), NodeId::Client(1)])
    }

    /// Both parties send `bytes_each` to each other.
    pub fn exchange(&mut self, kind: MessageKind, bytes_each: u64) {
        for (from, to) in [(self.ends[0], self.ends[1]), (self.ends[1], self.ends[0])] {
            self.log.push(Message {
                round: self.round,
                phase: self.phase,
                from,
                to,
                kind,
                bytes: bytes_each,
                count: 1,
                wave: self.wave,
            });
        }
    }

    pub fn send(&mut self, from: NodeId, to: NodeId, kind: MessageKind, bytes: u64) {
        self.log.push(Message {
            round: self.round,
            phase: self.phase,
            from,
            to,
            kind,
            bytes,
            count: 1,
            wave: self.wave,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_classification() {
        use NodeId::*;
        assert_eq!(Channel::classify(Client(0), Client(1)), Channel::C2C);
        assert_eq!(Channel::classify(Client(3), ClientAggregator), Channel::C2C);
        assert_eq!(Channel::classify(Server(1), Client(1)), Channel::S2C);
        assert_eq!(Channel::classify(Client(1), Server(2)), Channel::C2S);
        assert_eq!(Channel::classify(Dealer, Client(1)), Channel::Offline);
        assert_eq!(Channel::classify(ModelOwner, Server(1)), Channel::Offline);
    }

    #[test]
    fn exchange_records_both_directions() {
        let mut link = PairLink::loopback();
        link.exchange(MessageKind::BeaverOpen, 16);
        assert_eq!(link.log.message_count(), 2);
        assert_eq!(link.log.bytes_on(Channel::C2C), 32);
        let m = link.log.messages();
        assert_eq!((m[0].from, m[0].to), (m[1].to, m[1].from));
    }
}

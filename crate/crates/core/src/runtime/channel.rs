//! Transport-independent reliable FIFO state.
//!
//! The sender numbers messages 1, 2, ... and keeps them until a cumulative
//! acknowledgement covers them. The receiver delivers only the next expected
//! number, dropping duplicates and anything after a gap; the sender's
//! periodic resend of every unacknowledged message fills the gap.

use std::collections::VecDeque;

use crate::node::NodeId;
use crate::runtime::SendError;

#[derive(Debug)]
pub struct OutboundChannel {
    dest: NodeId,
    capacity: usize,
    resend_interval_ms: u64,
    next_seq: u64,
    unacked: VecDeque<(u64, Vec<u8>)>,
    sent_total: u64,
}

impl OutboundChannel {
    pub fn new(dest: NodeId, capacity: usize, resend_interval_ms: u64) -> Self {
        assert!(capacity > 0, "channel capacity must be positive");
        OutboundChannel { dest, capacity, resend_interval_ms, next_seq: 1, unacked: VecDeque::new(), sent_total: 0 }
    }

    pub fn dest(&self) -> NodeId {
        self.dest
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn resend_interval_ms(&self) -> u64 {
        self.resend_interval_ms
    }

    /// Assigns the next sequence number and stores the frame `build` makes
    /// for it.
    pub fn enqueue(&mut self, build: impl FnOnce(u64) -> Vec<u8>) -> Result<u64, SendError> {
        if self.unacked.len() >= self.capacity {
            return Err(SendError::QueueFull { dest: self.dest, capacity: self.capacity });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.unacked.push_back((seq, build(seq)));
        self.sent_total += 1;
        Ok(seq)
    }

    /// Drops everything up to and including `seq`; returns how many.
    pub fn ack(&mut self, seq: u64) -> usize {
        let before = self.unacked.len();
        while self.unacked.front().is_some_and(|(s, _)| *s <= seq) {
            self.unacked.pop_front();
        }
        before - self.unacked.len()
    }

    pub fn unacked(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.unacked.iter().map(|(s, b)| (*s, b.as_slice()))
    }

    pub fn frame(&self, seq: u64) -> Option<&[u8]> {
        self.unacked.iter().find(|(s, _)| *s == seq).map(|(_, b)| b.as_slice())
    }

    pub fn len(&self) -> usize {
        self.unacked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unacked.is_empty()
    }

    pub fn sent_total(&self) -> u64 {
        self.sent_total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accept {
    Deliver,
    Duplicate,
    Gap,
}

#[derive(Debug, Default, Clone)]
pub struct InboundChannel {
    delivered: u64,
}

impl InboundChannel {
    pub fn accept(&mut self, seq: u64) -> Accept {
        if seq == self.delivered + 1 {
            self.delivered = seq;
            Accept::Deliver
        } else if seq <= self.delivered {
            Accept::Duplicate
        } else {
            Accept::Gap
        }
    }

    /// Cumulative acknowledgement to send back.
    pub fn ack_value(&self) -> u64 {
        self.delivered
    }
}

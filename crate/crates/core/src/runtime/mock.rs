//! In-memory [`Context`] for driving protocol handlers directly in tests.

use std::cell::{Cell, RefCell};

use super::{Context, Protocol, ReplyAgent, ReplyError, SendError};
use crate::history::{History, HistoryEvent};
use crate::node::NodeId;

pub struct MockContext<P: Protocol> {
    pub node: NodeId,
    pub now: Cell<u64>,
    pub sent: RefCell<Vec<(NodeId, P::ServerMsg)>>,
    pub replies: RefCell<Vec<(u64, P::Reply)>>,
    pub deferred: RefCell<Vec<(ReplyAgent, P::ClientMsg, u64)>>,
    pub history: RefCell<History>,
}

impl<P: Protocol> MockContext<P> {
    pub fn new(node: NodeId, now: u64) -> Self {
        MockContext {
            node,
            now: Cell::new(now),
            sent: RefCell::new(Vec::new()),
            replies: RefCell::new(Vec::new()),
            deferred: RefCell::new(Vec::new()),
            history: RefCell::new(History::default()),
        }
    }

    pub fn take_sent(&self) -> Vec<(NodeId, P::ServerMsg)> {
        self.sent.take()
    }

    pub fn take_replies(&self) -> Vec<P::Reply> {
        self.replies.take().into_iter().map(|(_, r)| r).collect()
    }

    /// Single reply produced so far; panics otherwise.
    pub fn only_reply(&self) -> P::Reply {
        let mut replies = self.take_replies();
        assert_eq!(replies.len(), 1, "expected exactly one reply");
        replies.pop().expect("one reply")
    }

    pub fn take_deferred(&self) -> Vec<(ReplyAgent, P::ClientMsg, u64)> {
        self.deferred.take()
    }

    pub fn agent(&self, client_id: u64) -> ReplyAgent {
        ReplyAgent::new(0, client_id, None)
    }
}

impl<P: Protocol> Context<P> for MockContext<P> {
    fn node(&self) -> NodeId {
        self.node
    }

    fn now_ms(&self) -> u64 {
        self.now.get()
    }

    fn send_to_server(&self, dest: NodeId, msg: &P::ServerMsg) -> Result<(), SendError> {
        use crate::codec::Message;
        let copy = P::ServerMsg::decode(&msg.encode()).expect("own encoding decodes");
        self.sent.borrow_mut().push((dest, copy));
        Ok(())
    }

    fn send_reply(&self, agent: &ReplyAgent, reply: &P::Reply) -> Result<(), ReplyError> {
        use crate::codec::Message;
        agent.claim()?;
        let copy = P::Reply::decode(&reply.encode()).expect("own encoding decodes");
        self.replies.borrow_mut().push((agent.request_id, copy));
        Ok(())
    }

    fn defer(&self, agent: ReplyAgent, msg: P::ClientMsg, delay_ms: u64) {
        self.deferred.borrow_mut().push((agent, msg, delay_ms));
    }

    fn recording(&self) -> bool {
        true
    }

    fn record(&self, event: HistoryEvent) {
        self.history.borrow_mut().push(event);
    }
}

//! Seeded, splittable random streams.
//!
//! Every replication owns a family of ChaCha8 streams derived from one base
//! seed. Event selection, holding times, action draws and weight
//! initialization each read from their own stream, so swapping the routing
//! policy never perturbs the arrival/departure sequence of a paired run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Events = 0,
    Holding = 1,
    Actions = 2,
    Init = 3,
    Scratch = 4,
}

const STREAMS_PER_REPLICATION: u64 = 8;

/// Independent sub-stream `which` of replication `replication` under `seed`.
pub fn stream(seed: u64, replication: u64, which: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication * STREAMS_PER_REPLICATION + which as u64);
    rng
}

/// The three streams consumed while driving the chain.
#[derive(Clone, Debug)]
pub struct RngStreams {
    pub events: SimRng,
    pub holding: SimRng,
    pub actions: SimRng,
}

impl RngStreams {
    pub fn new(seed: u64, replication: u64) -> Self {
        RngStreams {
            events: stream(seed, replication, Stream::Events),
            holding: stream(seed, replication, Stream::Holding),
            actions: stream(seed, replication, Stream::Actions),
        }
    }
}
